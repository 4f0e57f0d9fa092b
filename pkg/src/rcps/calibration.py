"""Calibration of the interval scale factor with an upper confidence bound.

Given heuristic prediction triples on held-out data, pick the smallest scale
lambda_hat such that the upper confidence bound on the miss-fraction risk
stays below alpha for every grid value from lambda_hat upward. Only the
Hoeffding bound ships, but any function (mean, n, delta) -> ucb that is
monotone in the mean can be plugged in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ImageTensor, PredictionTriple, make_interval_field, pixel_loss
from .exceptions import ArgumentError, InfeasibleError

__all__ = [
    "RiskSpec",
    "LambdaGrid",
    "CalibrationResult",
    "hoeffding_ucb",
    "hoeffding_slack",
    "coverage_thresholds",
    "build_lambda_grid",
    "risk_curve",
    "select_lambda",
    "calibrate",
]

# Floor applied to heuristic lengths when computing residual-to-length ratios.
# A zero-length head at a perfectly known pixel would otherwise send the grid
# maximum to infinity. This is the only place an epsilon enters; coverage
# itself always uses exact comparisons.
LENGTH_EPSILON = 1e-6

CalibPair = tuple[PredictionTriple, ImageTensor]
BoundFn = Callable[[float, int, float], float]


@dataclass(frozen=True)
class RiskSpec:
    """Target risk level alpha and tolerated failure rate delta, both in (0, 1)."""

    alpha: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ArgumentError(f"alpha must be in (0, 1), got {self.alpha}")
        if not (0.0 < self.delta < 1.0):
            raise ArgumentError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class LambdaGrid:
    """Ascending candidate scale values, ending at the data-driven maximum."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ArgumentError("grid must be a non-empty 1-D array")
        if v[0] < 0.0 or not np.isfinite(v).all():
            raise ArgumentError("grid values must be finite and >= 0")
        if v.size > 1 and np.any(np.diff(v) <= 0.0):
            raise ArgumentError("grid values must be strictly ascending")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def lambda_max(self) -> float:
        return float(self.values[-1])

    @property
    def count(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of a calibration run: the chosen scale plus both risk curves."""

    lambda_hat: float
    grid: LambdaGrid
    empirical_risk: np.ndarray
    ucb: np.ndarray
    n: int
    spec: RiskSpec
    bound_name: str = "hoeffding"

    def __post_init__(self):
        risk = np.asarray(self.empirical_risk, dtype=np.float64)
        ucb = np.asarray(self.ucb, dtype=np.float64)
        if risk.shape != self.grid.values.shape or ucb.shape != risk.shape:
            raise ArgumentError("curves must align with the grid")
        if not np.any(self.grid.values == self.lambda_hat):
            raise ArgumentError("lambda_hat must be a grid value")
        if np.any(ucb < risk):
            raise ArgumentError("upper confidence bound fell below the empirical risk")
        for name, curve in (("empirical risk", risk), ("ucb", ucb)):
            if curve.size > 1 and np.any(np.diff(curve) > 0.0):
                raise ArgumentError(f"{name} curve must be nonincreasing in lambda")
        for arr in (risk, ucb):
            arr.flags.writeable = False
        object.__setattr__(self, "empirical_risk", risk)
        object.__setattr__(self, "ucb", ucb)

    def to_dict(self) -> dict:
        return {
            "lambda_hat": float(self.lambda_hat),
            "alpha": self.spec.alpha,
            "delta": self.spec.delta,
            "n": self.n,
            "bound": self.bound_name,
            "grid": {
                "min": float(self.grid.values[0]),
                "max": float(self.grid.lambda_max),
                "count": self.grid.count,
            },
            "risk_curve": [float(v) for v in self.empirical_risk],
            "ucb_curve": [float(v) for v in self.ucb],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        g = d["grid"]
        values = np.linspace(g["min"], g["max"], g["count"])
        return cls(
            lambda_hat=float(d["lambda_hat"]),
            grid=LambdaGrid(values),
            empirical_risk=np.asarray(d["risk_curve"], dtype=np.float64),
            ucb=np.asarray(d["ucb_curve"], dtype=np.float64),
            n=int(d["n"]),
            spec=RiskSpec(alpha=float(d["alpha"]), delta=float(d["delta"])),
            bound_name=str(d["bound"]),
        )


def hoeffding_ucb(mean_loss: float, n: int, delta: float) -> float:
    """Hoeffding upper confidence bound for a [0, 1]-bounded mean.

    mean_loss + sqrt(log(1 / delta) / (2 n)). Not clipped: values above 1 are
    returned as-is.
    """
    if n < 1:
        raise ArgumentError(f"need n >= 1 calibration points, got {n}")
    if not (0.0 < delta < 1.0):
        raise ArgumentError(f"delta must be in (0, 1), got {delta}")
    return mean_loss + math.sqrt(math.log(1.0 / delta) / (2.0 * n))


def hoeffding_slack(n: int, delta: float) -> float:
    """The additive term of the Hoeffding bound: sqrt(log(1/delta) / (2n))."""
    return hoeffding_ucb(0.0, n, delta)


def coverage_thresholds(pred: PredictionTriple, truth: ImageTensor) -> np.ndarray:
    """Per-pixel minimal scale at which the pixel becomes covered.

    For closed intervals the pixel is covered at scale s exactly when
    s >= threshold; pixels whose relevant heuristic length is zero while the
    residual is not can never be covered and get +inf.
    """
    y = truth.data
    if y.shape != pred.shape:
        raise ArgumentError(f"truth shape {y.shape} does not match triple {pred.shape}")
    resid = y - pred.prediction.data
    up = pred.upper_length.data
    lo = pred.lower_length.data
    with np.errstate(divide="ignore"):
        t = np.where(
            resid > 0.0,
            np.divide(resid, up, out=np.full_like(resid, np.inf), where=up > 0.0),
            np.divide(-resid, lo, out=np.full_like(resid, np.inf), where=lo > 0.0),
        )
    return np.where(resid == 0.0, 0.0, t)


def build_lambda_grid(calib: Sequence[CalibPair], count: int = 1000) -> LambdaGrid:
    """Uniform grid on [0, lambda_max] with a data-driven maximum.

    lambda_max is the worst residual-to-heuristic-length ratio over all
    calibration pixels, with lengths floored at LENGTH_EPSILON so the scan
    always starts from an endpoint whose risk is zero (or the floor-clamped
    miss fraction when some pixel has a zero-length head and a residual).
    """
    if len(calib) == 0:
        raise ArgumentError("calibration set is empty")
    if count < 1:
        raise ArgumentError(f"grid count must be >= 1, got {count}")
    lam_max = 0.0
    for pred, truth in calib:
        y = truth.data
        if y.shape != pred.shape:
            raise ArgumentError(
                f"truth shape {y.shape} does not match triple {pred.shape}"
            )
        resid = y - pred.prediction.data
        up = np.maximum(pred.upper_length.data, LENGTH_EPSILON)
        lo = np.maximum(pred.lower_length.data, LENGTH_EPSILON)
        ratios = np.where(resid > 0.0, resid / up, -resid / lo)
        lam_max = max(lam_max, float(ratios.max()))
    if lam_max == 0.0:
        return LambdaGrid(np.zeros(1))
    return LambdaGrid(np.linspace(0.0, lam_max, count))


def _risk_curve_direct(calib, grid_values):
    total = np.zeros(grid_values.size)
    for pred, truth in calib:
        losses = np.array(
            [pixel_loss(make_interval_field(pred, s), truth) for s in grid_values]
        )
        total += losses
    return total / len(calib)


def _risk_curve_threshold(calib, grid_values):
    total = np.zeros(grid_values.size)
    for pred, truth in calib:
        t = np.sort(coverage_thresholds(pred, truth), axis=None)
        covered = np.searchsorted(t, grid_values, side="right")
        total += 1.0 - covered / t.size
    return total / len(calib)


def risk_curve(
    calib: Sequence[CalibPair], grid: LambdaGrid, method: str = "threshold"
) -> np.ndarray:
    """Mean miss fraction over the calibration images at each grid scale.

    ``threshold`` sorts each image's per-pixel coverage thresholds once and
    counts misses by binary search; ``direct`` materializes the interval
    field at every grid value and applies the pixel loss. Both compute the
    same nonincreasing curve (equality is exercised in the test suite);
    threshold is the default because it is grid-size independent per pixel.
    """
    if len(calib) == 0:
        raise ArgumentError("calibration set is empty")
    if method == "threshold":
        return _risk_curve_threshold(calib, grid.values)
    if method == "direct":
        return _risk_curve_direct(calib, grid.values)
    raise ArgumentError(f"unknown risk_curve method {method!r}")


def select_lambda(
    curve: np.ndarray,
    grid: LambdaGrid,
    n: int,
    spec: RiskSpec,
    bound: BoundFn = hoeffding_ucb,
    bound_name: str = "hoeffding",
) -> CalibrationResult:
    """Pick the smallest grid scale whose bound holds from there upward.

    Scans downward from lambda_max and backtracks one step past the first
    violation; because the bound is monotone in the mean and the curve is
    nonincreasing, this equals the smallest lambda for which every grid value
    above it also satisfies ucb <= alpha.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if curve.shape != grid.values.shape:
        raise ArgumentError("curve must align with the grid")
    ucb = np.array([bound(float(m), n, spec.delta) for m in curve])

    if ucb[-1] > spec.alpha:
        min_ucb = float(ucb[-1])
        residual_risk = float(curve[-1])
        needed_n = None
        if residual_risk < spec.alpha:
            gap = spec.alpha - residual_risk
            needed_n = math.ceil(math.log(1.0 / spec.delta) / (2.0 * gap * gap))
        raise InfeasibleError(
            f"calibration set too small or heuristic too poor for "
            f"(alpha={spec.alpha}, delta={spec.delta}): best achievable ucb is "
            f"{min_ucb:.6g}",
            min_ucb=min_ucb,
            needed_n=needed_n,
            needed_alpha=min_ucb,
        )

    idx = grid.count - 1
    while idx >= 0 and ucb[idx] <= spec.alpha:
        idx -= 1
    first_ok = idx + 1
    return CalibrationResult(
        lambda_hat=float(grid.values[first_ok]),
        grid=grid,
        empirical_risk=curve,
        ucb=ucb,
        n=n,
        spec=spec,
        bound_name=bound_name,
    )


def calibrate(
    calib: Sequence[CalibPair],
    spec: RiskSpec,
    grid_count: int = 1000,
    bound: BoundFn = hoeffding_ucb,
    bound_name: str = "hoeffding",
) -> CalibrationResult:
    """Grid construction, risk curve, and scale selection in one call.

    The calibration pairs must be disjoint from the data used to train the
    heuristic; the guarantee is over the draw of this held-out set.
    """
    grid = build_lambda_grid(calib, grid_count)
    curve = risk_curve(calib, grid)
    return select_lambda(curve, grid, len(calib), spec, bound, bound_name)
