"""Synthetic datasets with known conditional distributions.

Two generators: a Gaussian noise field over a fixed signal, whose true
per-pixel coverage probability is available in closed form, and a
nearest-neighbor downsampling task where every factor-th pixel of the input
equals the target exactly. Both are deterministic under their seed, with
per-image derived seeds so generation could be parallelized without changing
the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .core import ImageTensor, PredictionTriple
from .exceptions import ArgumentError
from .heuristics import QuantileLevel

__all__ = [
    "GaussianFieldSpec",
    "DownsampleTaskSpec",
    "GaussianDataset",
    "gen_gaussian_field",
    "oracle_prediction",
    "quantile_oracle_prediction",
    "oracle_risk",
    "expected_clip_fraction",
    "gen_downsample_task",
    "normal_cdf",
]

SIGNALS = ("constant", "smooth-gradient", "checkerboard")


def normal_cdf(x):
    """Standard normal CDF, exact to double precision via the error function."""
    return ndtr(x)


@dataclass(frozen=True)
class GaussianFieldSpec:
    """Fixed signal image plus independent per-pixel Gaussian noise."""

    height: int
    width: int
    noise_std: np.ndarray
    signal: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ArgumentError("image dimensions must be positive")
        if self.signal not in SIGNALS:
            raise ArgumentError(f"signal must be one of {SIGNALS}, got {self.signal!r}")
        std = np.broadcast_to(
            np.asarray(self.noise_std, dtype=np.float64), (self.height, self.width)
        ).copy()
        if not np.isfinite(std).all() or std.min() <= 0.0:
            raise ArgumentError("noise_std must be finite and > 0 everywhere")
        std.flags.writeable = False
        object.__setattr__(self, "noise_std", std)

    def signal_image(self) -> np.ndarray:
        m, n = self.height, self.width
        if self.signal == "constant":
            return np.full((m, n), 0.5)
        if self.signal == "smooth-gradient":
            rows = np.arange(m)[:, None]
            cols = np.arange(n)[None, :]
            span = max(m + n - 2, 1)
            return 0.25 + 0.5 * (rows + cols) / span
        blocks = (np.add.outer(np.arange(m) // 4, np.arange(n) // 4)) % 2
        return np.where(blocks == 0, 0.35, 0.65)


@dataclass(frozen=True)
class DownsampleTaskSpec:
    """Super-resolution style task: input is a block-replicated downsample."""

    height: int
    width: int
    factor: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ArgumentError("factor must be >= 1")
        if self.height % self.factor or self.width % self.factor:
            raise ArgumentError(
                f"dimensions ({self.height}, {self.width}) must be divisible "
                f"by factor {self.factor}"
            )


@dataclass(frozen=True)
class GaussianDataset:
    """Generated samples plus the generator's ground-truth noise field."""

    samples: tuple
    noise_std: np.ndarray
    clip_fraction: float


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def gen_gaussian_field(spec: GaussianFieldSpec, count: int) -> GaussianDataset:
    """Draw ``count`` (input, target) pairs; the input is always the signal.

    Targets are clipped to [0, 1] after adding noise; the fraction of clipped
    pixels is reported so oracle-based consumers can refuse datasets where
    clipping distorts the Gaussian coverage probabilities.
    """
    if count < 1:
        raise ArgumentError("count must be >= 1")
    signal = spec.signal_image()
    x = ImageTensor(signal)
    samples = []
    clipped = 0
    for i in range(count):
        rng = _image_rng(spec.seed, i)
        y = signal + spec.noise_std * rng.standard_normal(signal.shape)
        clipped += int(np.count_nonzero((y < 0.0) | (y > 1.0)))
        samples.append((x, ImageTensor(np.clip(y, 0.0, 1.0))))
    return GaussianDataset(
        samples=tuple(samples),
        noise_std=spec.noise_std,
        clip_fraction=clipped / (count * signal.size),
    )


def oracle_prediction(spec: GaussianFieldSpec) -> PredictionTriple:
    """The perfect heuristic: predict the signal, one noise-std per side."""
    signal = ImageTensor(spec.signal_image())
    std = ImageTensor(spec.noise_std, standardized=True)
    return PredictionTriple(prediction=signal, lower_length=std, upper_length=std)


def quantile_oracle_prediction(
    spec: GaussianFieldSpec, level: QuantileLevel
) -> PredictionTriple:
    """Exact central-quantile heuristic: lengths are the half-width of the
    central (1 - alpha) interval, so a scale of 1 already hits the target."""
    from scipy.special import ndtri

    z = ndtri(level.upper)
    signal = ImageTensor(spec.signal_image())
    half = ImageTensor(z * spec.noise_std, standardized=True)
    return PredictionTriple(prediction=signal, lower_length=half, upper_length=half)


def expected_clip_fraction(spec: GaussianFieldSpec) -> float:
    """Analytic probability that a generated pixel lands outside [0, 1]."""
    s = spec.signal_image()
    std = spec.noise_std
    return float(np.mean(ndtr(-s / std) + ndtr((s - 1.0) / std)))


def oracle_risk(scale: float, spec: GaussianFieldSpec, heuristic_std=None) -> float:
    """True expected miss fraction of signal +/- scale * heuristic intervals.

    Mean over pixels of 2 * Phi(-scale * heuristic_std / noise_std); with the
    exact heuristic this is 2 * Phi(-scale). Refuses when clipping would make
    the Gaussian tail probabilities wrong.
    """
    if scale < 0.0:
        raise ArgumentError(f"scale must be >= 0, got {scale}")
    frac = expected_clip_fraction(spec)
    if frac > 1e-3:
        raise ArgumentError(
            f"oracle invalid: expected clip fraction {frac:.2e} exceeds 1e-3"
        )
    h = spec.noise_std if heuristic_std is None else np.asarray(heuristic_std)
    return float(np.mean(2.0 * ndtr(-scale * h / spec.noise_std)))


def _texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited procedural texture: four seeded cosine octaves in [0.1, 0.9]."""
    rows = (np.arange(height) / height)[:, None]
    cols = (np.arange(width) / width)[None, :]
    img = np.zeros((height, width))
    for octave in range(4):
        freq = 1.5 * 2.0**octave
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ramp = rows * np.cos(theta) + cols * np.sin(theta)
        img += 0.5**octave * np.cos(2.0 * np.pi * freq * ramp + phase)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.full_like(img, 0.5)
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def gen_downsample_task(
    spec: DownsampleTaskSpec, count: int
) -> Sequence[tuple[ImageTensor, ImageTensor]]:
    """Texture targets with block-replicated inputs.

    The input is the target downsampled by taking every factor-th pixel and
    replicated back to full size, so X equals Y exactly on the sample grid
    and is constant within each factor x factor block.
    """
    if count < 1:
        raise ArgumentError("count must be >= 1")
    f = spec.factor
    out = []
    for i in range(count):
        y = _texture(spec.height, spec.width, _image_rng(spec.seed, i))
        ds = y[::f, ::f]
        x = np.repeat(np.repeat(ds, f, axis=0), f, axis=1)
        out.append((ImageTensor(x), ImageTensor(y)))
    return out
