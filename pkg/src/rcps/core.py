"""Domain types, interval construction and the pixelwise miss-fraction loss.

Everything here is a pure function over immutable inputs: the array payload
of every domain type is made read-only at construction, so values can be
shared freely across threads. Reductions are either integer counts or
sequential-by-index sums, so repeated runs produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ArgumentError, ShapeError

__all__ = [
    "ImageTensor",
    "PredictionTriple",
    "IntervalField",
    "CoverageMask",
    "make_interval_field",
    "pixel_loss",
    "coverage_mask",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C", copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ImageTensor:
    """A 2-D (or channel-stacked 3-D) field of finite scalars.

    Values are stored as float64 regardless of the ingested dtype. Unless
    ``standardized`` is set, every element must lie in [0, 1]; standardized
    tensors (mean-zero targets, interval endpoints, raw model outputs) may
    take any finite value.
    """

    data: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim not in (2, 3):
            raise ShapeError(f"image tensor must be 2-D or 3-D, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeError("image tensor must be non-empty")
        arr = _freeze(arr)
        if not np.isfinite(arr).all():
            raise ArgumentError("image tensor contains non-finite values")
        if not self.standardized:
            lo, hi = arr.min(), arr.max()
            if lo < 0.0 or hi > 1.0:
                raise ArgumentError(
                    f"values in [{lo}, {hi}] outside [0, 1]; pass standardized=True "
                    "for data that is not unit-normalized"
                )
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]


def _plane(t: ImageTensor, name: str) -> np.ndarray:
    if t.data.ndim != 2:
        raise ShapeError(f"{name} must be single-channel 2-D, got shape {t.data.shape}")
    return t.data


@dataclass(frozen=True)
class PredictionTriple:
    """Per-pixel point prediction plus heuristic lower/upper interval lengths.

    The lengths are uncalibrated: they carry no coverage guarantee until a
    scale factor has been calibrated on held-out data.
    """

    prediction: ImageTensor
    lower_length: ImageTensor
    upper_length: ImageTensor

    def __post_init__(self):
        f = _plane(self.prediction, "prediction")
        lo = _plane(self.lower_length, "lower_length")
        up = _plane(self.upper_length, "upper_length")
        if not (f.shape == lo.shape == up.shape):
            raise ShapeError(
                f"prediction/length shapes differ: {f.shape}, {lo.shape}, {up.shape}"
            )
        if lo.min() < 0.0 or up.min() < 0.0:
            raise ArgumentError("heuristic interval lengths must be >= 0")

    @property
    def shape(self) -> tuple:
        return self.prediction.data.shape


@dataclass(frozen=True)
class IntervalField:
    """Per-pixel closed intervals [lo, hi]."""

    lo: ImageTensor
    hi: ImageTensor

    def __post_init__(self):
        lo = _plane(self.lo, "lo")
        hi = _plane(self.hi, "hi")
        if lo.shape != hi.shape:
            raise ShapeError(f"lo/hi shapes differ: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise ArgumentError("interval field has lo > hi at some pixel")

    @property
    def shape(self) -> tuple:
        return self.lo.data.shape

    def sizes(self) -> np.ndarray:
        """Per-pixel interval length hi - lo."""
        return self.hi.data - self.lo.data


@dataclass(frozen=True)
class CoverageMask:
    """Boolean field: True where the ground-truth pixel fell inside its interval."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.dtype != np.bool_:
            raise ShapeError("coverage mask must be a 2-D boolean array")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    def covered_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def mean(self) -> float:
        return self.covered_count() / self.bits.size


def make_interval_field(
    pred: PredictionTriple, scale: float, clip_unit: bool = False
) -> IntervalField:
    """Scale the heuristic lengths by ``scale`` and form closed intervals.

    lo = prediction - scale * lower_length, hi = prediction + scale * upper_length.
    Endpoints are not restricted to [0, 1] unless ``clip_unit`` is set; clipping
    only ever shrinks intervals, so it is off by default.
    """
    scale = float(scale)
    if not np.isfinite(scale) or scale < 0.0:
        raise ArgumentError(f"scale must be a finite value >= 0, got {scale}")
    f = pred.prediction.data
    lo = f - scale * pred.lower_length.data
    hi = f + scale * pred.upper_length.data
    if clip_unit:
        lo = np.clip(lo, 0.0, 1.0)
        hi = np.clip(hi, 0.0, 1.0)
    return IntervalField(
        ImageTensor(lo, standardized=True), ImageTensor(hi, standardized=True)
    )


def _check_same_shape(intervals: IntervalField, truth: ImageTensor) -> np.ndarray:
    y = _plane(truth, "truth")
    if y.shape != intervals.shape:
        raise ShapeError(
            f"truth shape {y.shape} does not match intervals {intervals.shape}"
        )
    return y


def coverage_mask(intervals: IntervalField, truth: ImageTensor) -> CoverageMask:
    """Membership test of each ground-truth pixel in its closed interval."""
    y = _check_same_shape(intervals, truth)
    bits = (intervals.lo.data <= y) & (y <= intervals.hi.data)
    return CoverageMask(bits)


def pixel_loss(intervals: IntervalField, truth: ImageTensor) -> float:
    """Fraction of pixels whose true value falls outside its interval.

    Always in [0, 1]; coverage is tested with exact floating comparison on
    closed endpoints. Equals 1 - mean(coverage_mask(intervals, truth)).
    """
    y = _check_same_shape(intervals, truth)
    covered = np.count_nonzero((intervals.lo.data <= y) & (y <= intervals.hi.data))
    return 1.0 - covered / y.size
