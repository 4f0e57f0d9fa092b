"""Evaluation metrics: risk, set sizes, size-stratified risk, and MSE.

Risk is averaged per image and then across images, matching a guarantee that
is an expectation over fresh (input, target) draws. Size strata use
deterministic lower-stratum tie assignment, so a head that emits quantized
near-constant sizes shows up as empty strata instead of being hidden by
random tie-breaking. Internal count identities are asserted on every report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._threads import thread_map
from .calibration import RiskSpec, calibrate
from .core import (
    ImageTensor,
    IntervalField,
    PredictionTriple,
    coverage_mask,
    make_interval_field,
    pixel_loss,
)
from .exceptions import ArgumentError, InfeasibleError, RcpsError

__all__ = [
    "SetSizeStats",
    "StratifiedRisk",
    "MetricsReport",
    "RiskTrialsResult",
    "empirical_risk",
    "set_size_stats",
    "size_stratified_risk",
    "mse",
    "metrics_report",
    "risk_trials",
]

HIST_BINS = 50


@dataclass(frozen=True)
class SetSizeStats:
    mean_size: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray


@dataclass(frozen=True)
class StratifiedRisk:
    """Miss rate within each interval-size stratum (ascending size).

    ``risks`` holds None for empty strata; ``boundaries`` are the nearest-rank
    size quantiles separating them. Counts are kept so the pooled miss rate
    can be reconstructed exactly from integers.
    """

    risks: tuple
    counts: tuple
    miss_counts: tuple
    boundaries: tuple


@dataclass(frozen=True)
class MetricsReport:
    empirical_risk: float
    per_image_risk: np.ndarray
    mean_set_size: float
    size_stats: SetSizeStats
    stratified: StratifiedRisk
    mse: float
    n_test: int

    def to_dict(self) -> dict:
        return {
            "empirical_risk": self.empirical_risk,
            "per_image_risk": [float(r) for r in self.per_image_risk],
            "mean_set_size": self.mean_set_size,
            "size_histogram": {
                "edges": [float(e) for e in self.size_stats.hist_edges],
                "counts": [int(c) for c in self.size_stats.hist_counts],
            },
            "stratified_risk": [
                None if r is None else float(r) for r in self.stratified.risks
            ],
            "stratified_counts": [int(c) for c in self.stratified.counts],
            "stratified_miss_counts": [int(c) for c in self.stratified.miss_counts],
            "stratum_boundaries": [float(b) for b in self.stratified.boundaries],
            "mse": self.mse,
            "n_test": self.n_test,
        }


def empirical_risk(
    test: Sequence[tuple[ImageTensor, ImageTensor]],
    predict: Callable[[ImageTensor], PredictionTriple],
    lambda_hat: float,
) -> tuple[float, np.ndarray]:
    """Mean miss fraction at the calibrated scale over held-out images."""
    if len(test) == 0:
        raise ArgumentError("test set is empty")
    per_image = np.array(
        [
            pixel_loss(make_interval_field(predict(x), lambda_hat), y)
            for x, y in test
        ]
    )
    return float(per_image.mean()), per_image


def set_size_stats(intervals: Sequence[IntervalField]) -> SetSizeStats:
    """Mean per-pixel interval size plus a uniform histogram over [0, max]."""
    if len(intervals) == 0:
        raise ArgumentError("no interval fields given")
    sizes = np.concatenate([iv.sizes().reshape(-1) for iv in intervals])
    top = float(sizes.max())
    counts, edges = np.histogram(sizes, bins=HIST_BINS, range=(0.0, top if top > 0 else 1.0))
    return SetSizeStats(float(sizes.mean()), edges, counts)


def _nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    rank = math.ceil(p * sorted_values.size)
    return float(sorted_values[max(rank, 1) - 1])


def size_stratified_risk(
    intervals: Sequence[IntervalField],
    truths: Sequence[ImageTensor],
    strata: int = 4,
) -> StratifiedRisk:
    """Miss rate within quantile strata of pooled pixel interval sizes.

    Boundary-sized pixels go to the lower stratum, deterministically. Strata
    left empty by ties are reported with count 0 and a None risk.
    """
    if len(intervals) != len(truths):
        raise ArgumentError("need one truth image per interval field")
    if strata < 1:
        raise ArgumentError("need at least one stratum")
    sizes = np.concatenate([iv.sizes().reshape(-1) for iv in intervals])
    missed = np.concatenate(
        [~coverage_mask(iv, y).bits.reshape(-1) for iv, y in zip(intervals, truths)]
    )
    if sizes.size < strata:
        raise ArgumentError(f"need at least {strata} pixels, got {sizes.size}")

    sorted_sizes = np.sort(sizes)
    bounds = [_nearest_rank(sorted_sizes, (k + 1) / strata) for k in range(strata - 1)]
    edges = np.array([-np.inf] + bounds + [np.inf])

    risks, counts, misses = [], [], []
    for k in range(strata):
        in_stratum = (sizes > edges[k]) & (sizes <= edges[k + 1])
        n_k = int(np.count_nonzero(in_stratum))
        miss_k = int(np.count_nonzero(missed & in_stratum))
        counts.append(n_k)
        misses.append(miss_k)
        risks.append(None if n_k == 0 else miss_k / n_k)
    return StratifiedRisk(
        risks=tuple(risks),
        counts=tuple(counts),
        miss_counts=tuple(misses),
        boundaries=tuple(bounds),
    )


def mse(
    predictions: Sequence[ImageTensor], truths: Sequence[ImageTensor]
) -> float:
    """Pooled mean squared error of point predictions against targets."""
    if len(predictions) == 0 or len(predictions) != len(truths):
        raise ArgumentError("need matching non-empty prediction/truth lists")
    se = 0.0
    n = 0
    for f, y in zip(predictions, truths):
        if f.data.shape != y.data.shape:
            raise ArgumentError(f"shape mismatch {f.data.shape} vs {y.data.shape}")
        se += float(((f.data - y.data) ** 2).sum())
        n += f.data.size
    return se / n


def metrics_report(
    items: Sequence[tuple[PredictionTriple, ImageTensor]], lambda_hat: float
) -> MetricsReport:
    """Full metric suite for precomputed triples at a calibrated scale.

    Verifies its own count identities: per-image risk + coverage = 1, stratum
    counts summing to the pixel count, and stratum misses summing to the
    pooled miss count.
    """
    if len(items) == 0:
        raise ArgumentError("empty evaluation set")
    intervals = [make_interval_field(pred, lambda_hat) for pred, _ in items]
    truths = [y for _, y in items]

    per_image = []
    total_px = 0
    total_missed = 0
    for iv, y in zip(intervals, truths):
        loss = pixel_loss(iv, y)
        cov = coverage_mask(iv, y)
        if loss + cov.mean() != 1.0:
            raise RcpsError("internal identity violated: risk + coverage != 1")
        per_image.append(loss)
        total_px += cov.bits.size
        total_missed += cov.bits.size - cov.covered_count()
    per_image = np.array(per_image)

    stats = set_size_stats(intervals)
    strat = size_stratified_risk(intervals, truths)
    if sum(strat.counts) != total_px:
        raise RcpsError("internal identity violated: stratum counts != pixel count")
    if sum(strat.miss_counts) != total_missed:
        raise RcpsError("internal identity violated: stratum misses != pooled misses")

    return MetricsReport(
        empirical_risk=float(per_image.mean()),
        per_image_risk=per_image,
        mean_set_size=stats.mean_size,
        size_stats=stats,
        stratified=strat,
        mse=mse([pred.prediction for pred, _ in items], truths),
        n_test=len(items),
    )


@dataclass(frozen=True)
class RiskTrialsResult:
    """Held-out risks over repeated calibrate/evaluate splits.

    Infeasible trials (no scale satisfied the bound) contribute no risk but
    are reported by index rather than silently dropped.
    """

    risks: np.ndarray
    lambda_hats: np.ndarray
    infeasible_trials: tuple
    n_trials: int
    n_calib: int

    def to_dict(self) -> dict:
        return {
            "risks": [float(r) for r in self.risks],
            "lambda_hats": [float(v) for v in self.lambda_hats],
            "infeasible_trials": [int(t) for t in self.infeasible_trials],
            "n_trials": self.n_trials,
            "n_calib": self.n_calib,
        }


def risk_trials(
    pool: Sequence[tuple[PredictionTriple, ImageTensor]],
    spec: RiskSpec,
    n_calib: int,
    trials: int,
    seed: int,
    grid_count: int = 1000,
) -> RiskTrialsResult:
    """Repeatedly split the pool, calibrate, and measure held-out risk.

    Trial t uses the generator seeded with seed XOR t, so trials are
    independent of each other and of how many run in parallel.
    """
    if n_calib < 1 or len(pool) < n_calib + 1:
        raise ArgumentError(
            f"pool of {len(pool)} cannot provide {n_calib} calibration items "
            "plus at least one test item"
        )
    if trials < 1:
        raise ArgumentError("need at least one trial")

    def one_trial(t: int):
        rng = np.random.default_rng(seed ^ t)
        order = rng.permutation(len(pool))
        calib = [pool[i] for i in order[:n_calib]]
        test = [pool[i] for i in order[n_calib:]]
        try:
            result = calibrate(calib, spec, grid_count)
        except InfeasibleError:
            return None
        losses = [
            pixel_loss(make_interval_field(pred, result.lambda_hat), y)
            for pred, y in test
        ]
        return float(np.mean(losses)), result.lambda_hat

    outcomes = thread_map(one_trial, range(trials))
    risks = [o[0] for o in outcomes if o is not None]
    lambdas = [o[1] for o in outcomes if o is not None]
    infeasible = tuple(t for t, o in enumerate(outcomes) if o is None)
    return RiskTrialsResult(
        risks=np.array(risks),
        lambda_hats=np.array(lambdas),
        infeasible_trials=infeasible,
        n_trials=trials,
        n_calib=n_calib,
    )
