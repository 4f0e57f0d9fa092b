import numpy as np
import pytest

from rcps.calibration import RiskSpec
from rcps.core import ImageTensor, IntervalField, PredictionTriple, make_interval_field
from rcps.evaluation import (
    empirical_risk,
    metrics_report,
    mse,
    risk_trials,
    set_size_stats,
    size_stratified_risk,
)
from rcps.exceptions import ArgumentError
from rcps.synthetic import GaussianFieldSpec, gen_gaussian_field, oracle_prediction

from conftest import random_triple


def interval_from_sizes(sizes):
    sizes = np.asarray(sizes, dtype=np.float64)
    lo = np.zeros_like(sizes)
    return IntervalField(
        ImageTensor(lo, standardized=True), ImageTensor(sizes, standardized=True)
    )


def fixed_pool(rng, count, shape=(6, 6)):
    pool = []
    for _ in range(count):
        pred = random_triple(rng, *shape)
        y = ImageTensor(rng.uniform(0, 1, shape))
        pool.append((pred, y))
    return pool


class TestEmpiricalRisk:
    def test_huge_scale_covers_all(self, rng):
        pool = fixed_pool(rng, 4)
        risk, per_image = empirical_risk(
            [(p.prediction, y) for p, y in pool],
            lambda x: random_triple(np.random.default_rng(0), 6, 6),
            lambda_hat=1e6,
        )
        assert risk == 0.0
        assert np.all(per_image == 0.0)

    def test_mean_of_two(self):
        # craft two images with losses 0.1 and 0.3 -> mean 0.2
        base = np.full((10, 10), 0.5)
        pred = PredictionTriple(
            prediction=ImageTensor(base),
            lower_length=ImageTensor(np.full((10, 10), 0.1)),
            upper_length=ImageTensor(np.full((10, 10), 0.1)),
        )
        y1 = base.copy()
        y1.flat[:10] = 0.9  # 10 of 100 outside
        y2 = base.copy()
        y2.flat[:30] = 0.9
        risk, per_image = empirical_risk(
            [(ImageTensor(base), ImageTensor(y1)), (ImageTensor(base), ImageTensor(y2))],
            lambda x: pred,
            lambda_hat=1.0,
        )
        assert per_image == pytest.approx([0.1, 0.3])
        assert risk == pytest.approx(0.2)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            empirical_risk([], lambda x: None, 1.0)


class TestSetSizeStats:
    def test_zero_scale(self, rng):
        pool = fixed_pool(rng, 3)
        stats = set_size_stats([make_interval_field(p, 0.0) for p, _ in pool])
        assert stats.mean_size == 0.0

    def test_constant_heuristic_linear_in_scale(self):
        pred = PredictionTriple(
            prediction=ImageTensor(np.full((4, 4), 0.5)),
            lower_length=ImageTensor(np.full((4, 4), 0.07)),
            upper_length=ImageTensor(np.full((4, 4), 0.07)),
        )
        lam = 1.7
        stats = set_size_stats([make_interval_field(pred, lam)])
        assert stats.mean_size == pytest.approx(2 * lam * 0.07)

    def test_doubling_scale_doubles_mean(self, rng):
        pool = fixed_pool(rng, 3)
        one = set_size_stats([make_interval_field(p, 1.0) for p, _ in pool])
        two = set_size_stats([make_interval_field(p, 2.0) for p, _ in pool])
        assert two.mean_size == pytest.approx(2 * one.mean_size)

    def test_histogram_shape(self, rng):
        pool = fixed_pool(rng, 2)
        stats = set_size_stats([make_interval_field(p, 1.0) for p, _ in pool])
        assert stats.hist_edges.size == 51
        assert stats.hist_counts.sum() == 2 * 36


class TestSizeStratifiedRisk:
    def test_enumerated_example(self):
        # 8 pixels, sizes 1..8, misses at sizes 1 and 2 -> quartile risks (1,0,0,0)
        sizes = np.arange(1.0, 9.0).reshape(2, 4)
        iv = interval_from_sizes(sizes)
        truth = iv.hi.data.copy()  # covered everywhere...
        truth[0, 0] = 9.5  # size-1 pixel misses
        truth[0, 1] = 9.5  # size-2 pixel misses
        strat = size_stratified_risk([iv], [ImageTensor(truth, standardized=True)])
        assert strat.risks == (1.0, 0.0, 0.0, 0.0)
        assert strat.counts == (2, 2, 2, 2)
        assert strat.boundaries == (2.0, 4.0, 6.0)

    def test_identical_sizes_collapse_to_first_stratum(self, rng):
        iv = interval_from_sizes(np.full((3, 3), 2.5))
        truth = ImageTensor(rng.uniform(0, 1, (3, 3)))
        strat = size_stratified_risk([iv], [truth])
        assert strat.counts == (9, 0, 0, 0)
        assert strat.risks[1] is None and strat.risks[3] is None

    def test_boundary_goes_to_lower_stratum(self):
        sizes = np.array([[1.0, 1.0, 2.0, 2.0]])
        iv = interval_from_sizes(sizes)
        truth = ImageTensor(np.full((1, 4), 0.1))
        strat = size_stratified_risk([iv], [truth])
        # nearest-rank quartiles of (1,1,2,2): q1=1, q2=1, q3=2
        assert strat.counts == (2, 0, 2, 0)

    def test_uniform_coverage_matches_overall(self, rng):
        # independent misses: every stratum's risk near the global rate
        sizes = rng.uniform(0.1, 1.0, (100, 100))
        iv = interval_from_sizes(sizes)
        p_miss = 0.2
        miss = rng.uniform(0, 1, sizes.shape) < p_miss
        truth = np.where(miss, sizes + 1.0, sizes * 0.5)
        strat = size_stratified_risk([iv], [ImageTensor(truth, standardized=True)])
        sd = np.sqrt(p_miss * (1 - p_miss) / 2500)
        for risk in strat.risks:
            assert abs(risk - p_miss) < 3.5 * sd

    def test_fewer_than_strata_rejected(self, rng):
        iv = interval_from_sizes(np.ones((1, 3)))
        with pytest.raises(ArgumentError):
            size_stratified_risk([iv], [ImageTensor(np.full((1, 3), 0.1))])


class TestMse:
    def test_exact_fit(self, rng):
        y = ImageTensor(rng.uniform(0, 1, (4, 4)))
        assert mse([y], [y]) == 0.0

    def test_constant_offset(self):
        a = ImageTensor(np.full((5, 5), 0.5))
        b = ImageTensor(np.full((5, 5), 0.6))
        assert mse([a], [b]) == pytest.approx(0.01)

    def test_pooled_over_images(self, rng):
        f1, y1 = (ImageTensor(rng.uniform(0, 1, (4, 4))) for _ in range(2))
        f2, y2 = (ImageTensor(rng.uniform(0, 1, (4, 4))) for _ in range(2))
        pooled = mse([f1, f2], [y1, y2])
        assert pooled == pytest.approx((mse([f1], [y1]) + mse([f2], [y2])) / 2)


class TestMetricsReport:
    def test_identities_hold(self, rng):
        pool = fixed_pool(rng, 6)
        report = metrics_report(pool, 1.3)
        assert report.n_test == 6
        assert report.empirical_risk == report.per_image_risk.mean()
        assert sum(report.stratified.counts) == 6 * 36
        total_missed = sum(report.stratified.miss_counts)
        pooled_rate = total_missed / (6 * 36)
        weighted = sum(
            c * r
            for c, r in zip(report.stratified.counts, report.stratified.risks)
            if r is not None
        )
        assert weighted / (6 * 36) == pytest.approx(pooled_rate, abs=1e-15)

    def test_risk_matches_pooled_coverage(self, rng):
        # equal image sizes: per-image averaging agrees with pooled counting
        # up to float summation order
        pool = fixed_pool(rng, 7)
        lam = 1.1
        report = metrics_report(pool, lam)
        covered = 0
        total = 0
        from rcps.core import coverage_mask

        for pred, y in pool:
            mask = coverage_mask(make_interval_field(pred, lam), y)
            covered += mask.covered_count()
            total += mask.bits.size
        assert report.empirical_risk == pytest.approx(1.0 - covered / total, abs=1e-12)

    def test_to_dict_serializes_empty_strata(self, rng):
        pred = PredictionTriple(
            prediction=ImageTensor(np.full((4, 4), 0.5)),
            lower_length=ImageTensor(np.full((4, 4), 0.1)),
            upper_length=ImageTensor(np.full((4, 4), 0.1)),
        )
        y = ImageTensor(rng.uniform(0, 1, (4, 4)))
        d = metrics_report([(pred, y)], 1.0).to_dict()
        assert d["stratified_risk"][1] is None
        assert d["stratified_counts"][1] == 0


class TestRiskTrials:
    def make_pool(self, seed=0, count=40):
        spec = GaussianFieldSpec(8, 8, 0.05, signal="constant", seed=seed)
        ds = gen_gaussian_field(spec, count)
        triple = oracle_prediction(spec)
        return [(triple, y) for _, y in ds.samples]

    def test_single_trial_matches_manual(self):
        pool = self.make_pool()
        spec = RiskSpec(0.3, 0.3)
        result = risk_trials(pool, spec, n_calib=30, trials=1, seed=7)
        assert result.n_trials == 1
        assert result.risks.size + len(result.infeasible_trials) == 1

    def test_reproducible(self):
        pool = self.make_pool()
        spec = RiskSpec(0.3, 0.3)
        a = risk_trials(pool, spec, n_calib=30, trials=8, seed=3)
        b = risk_trials(pool, spec, n_calib=30, trials=8, seed=3)
        assert np.array_equal(a.risks, b.risks)
        assert np.array_equal(a.lambda_hats, b.lambda_hats)

    def test_infeasible_counted_not_dropped(self):
        pool = self.make_pool(count=10)
        # n_calib=4 gives slack ~0.54: alpha=0.2 unreachable
        result = risk_trials(pool, RiskSpec(0.2, 0.1), n_calib=4, trials=5, seed=1)
        assert len(result.infeasible_trials) == 5
        assert result.risks.size == 0

    def test_pool_too_small(self):
        pool = self.make_pool(count=5)
        with pytest.raises(ArgumentError):
            risk_trials(pool, RiskSpec(0.2, 0.2), n_calib=5, trials=2, seed=0)

    def test_thread_env_does_not_change_results(self, monkeypatch):
        pool = self.make_pool()
        spec = RiskSpec(0.3, 0.3)
        seq = risk_trials(pool, spec, n_calib=30, trials=6, seed=11)
        monkeypatch.setenv("RCPS_THREADS", "4")
        par = risk_trials(pool, spec, n_calib=30, trials=6, seed=11)
        assert np.array_equal(seq.risks, par.risks)
