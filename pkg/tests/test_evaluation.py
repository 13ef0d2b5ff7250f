"""Tests for KDEs, Monte-Carlo KL, posterior statistics and field metrics."""

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm, ttest_rel

from backend.errors import BandwidthFloorWarning, TooManyExclusionsError, UndefinedCorrelationError
from backend.inference.evaluation import (
    aggregate,
    cc,
    coverage_fraction,
    decode_field_stats,
    dice,
    field_metrics,
    kde_fit,
    kde_logpdf,
    kl_divergence_mc,
    paired_t_test,
    rmse,
    stat_difference,
    z_stats,
)
from backend.inference.vae import VaeModel
from backend.simulation.forward_model import GridGeometry


class TestKde:
    def test_silverman_bandwidth(self, rng):
        x = rng.standard_normal((400, 1))
        kde = kde_fit(x)
        expected = (4.0 / 3.0) ** 0.2 * 400 ** -0.2 * x.std(ddof=1)
        assert kde.bandwidth[0] == pytest.approx(expected)
        assert not kde.floored

    def test_logpdf_matches_kernel_sum(self, rng):
        x = rng.standard_normal((50, 2))
        kde = kde_fit(x, "scott")
        p = np.array([0.3, -0.2])
        direct = np.mean(np.prod(norm.pdf(p, loc=x, scale=kde.bandwidth), axis=1))
        assert np.exp(kde_logpdf(kde, p)[0]) == pytest.approx(direct, rel=1e-10)

    def test_integrates_to_one(self, rng):
        kde = kde_fit(rng.standard_normal(200))
        grid = np.linspace(-8, 8, 3201)
        assert trapezoid(np.exp(kde_logpdf(kde, grid[:, None])), grid) == pytest.approx(1.0, abs=1e-6)

    def test_chunking_is_transparent(self, rng):
        kde = kde_fit(rng.standard_normal((300, 2)))
        pts = rng.standard_normal((50, 2))
        np.testing.assert_allclose(kde_logpdf(kde, pts, chunk=7), kde_logpdf(kde, pts), rtol=1e-12)

    def test_zero_spread_is_floored(self):
        with pytest.warns(BandwidthFloorWarning):
            kde = kde_fit(np.ones((20, 2)))
        assert kde.floored
        np.testing.assert_array_equal(kde.bandwidth, 1e-6)

    def test_input_checks(self, rng):
        with pytest.raises(ValueError):
            kde_fit(rng.standard_normal((5, 2)))
        with pytest.raises(ValueError):
            kde_fit(rng.standard_normal((50, 2)), "median")


class TestKlDivergence:
    def test_gaussian_oracle(self, rng):
        x = rng.standard_normal((20_000, 1))
        est = kl_divergence_mc(x, lambda p: norm.logpdf(p[:, 0]), lambda p: norm.logpdf(p[:, 0], loc=1.0))
        assert est.value == pytest.approx(0.5, abs=0.03)
        assert est.n_used == 20_000
        assert est.exclusion_fraction == 0.0

    def test_kde_estimate(self, rng):
        p = kde_fit(rng.standard_normal((4_000, 1)))
        q = kde_fit(1.0 + rng.standard_normal((4_000, 1)))
        est = kl_divergence_mc(p.samples, lambda s: kde_logpdf(p, s), lambda s: kde_logpdf(q, s))
        assert est.value == pytest.approx(0.5, abs=0.1)

    def test_self_divergence_is_zero(self, rng):
        kde = kde_fit(rng.standard_normal((500, 2)))
        est = kl_divergence_mc(kde.samples, lambda s: kde_logpdf(kde, s), lambda s: kde_logpdf(kde, s))
        assert est.value == 0.0

    def test_exclusions(self, rng):
        x = rng.standard_normal((1_000, 1))

        def holed(fraction):
            def log_q(p):
                out = norm.logpdf(p[:, 0])
                out[: int(fraction * len(out))] = -np.inf
                return out
            return log_q

        est = kl_divergence_mc(x, lambda p: norm.logpdf(p[:, 0]), holed(0.02))
        assert est.exclusion_fraction == pytest.approx(0.02)
        assert est.n_used == 980
        with pytest.raises(TooManyExclusionsError):
            kl_divergence_mc(x, lambda p: norm.logpdf(p[:, 0]), holed(0.1))

    def test_error_shrinks_at_root_n(self):
        rng = np.random.default_rng(21)
        sizes = np.array([100, 400, 1_600, 6_400])
        rms = []
        for n in sizes:
            errors = [
                kl_divergence_mc(rng.standard_normal((n, 1)), lambda p: norm.logpdf(p[:, 0]), lambda p: norm.logpdf(p[:, 0], loc=1.0)).value - 0.5
                for _ in range(200)
            ]
            rms.append(np.sqrt(np.mean(np.square(errors))))
        slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
        assert -0.6 < slope < -0.4
        np.testing.assert_allclose(rms, 1.0 / np.sqrt(sizes), rtol=0.2)

    def test_needs_enough_samples(self, rng):
        with pytest.raises(ValueError):
            kl_divergence_mc(rng.standard_normal((50, 1)), norm.logpdf, norm.logpdf)


class TestPosteriorStats:
    def test_z_stats(self, rng):
        x = np.array([1.0, -1.0]) + 0.5 * rng.standard_normal((5_000, 2))
        stats = z_stats(x)
        np.testing.assert_allclose(stats.mean, [1.0, -1.0], atol=0.03)
        np.testing.assert_allclose(stats.std, 0.5, atol=0.03)
        np.testing.assert_allclose(stats.mode, [1.0, -1.0], atol=0.2)

    def test_decoded_field_stats(self, rng):
        geom = GridGeometry(8, 8)
        vae = VaeModel.initialize(geom.n_nodes, 6, 2, rng)
        samples = rng.standard_normal((40, 2))
        stats = decode_field_stats(vae, samples, z_mode=np.zeros(2))
        assert stats.mean_field.shape == (64,)
        assert np.all(stats.std_field >= 0)
        assert np.all((stats.mode_field > 0) & (stats.mode_field < 0.5))

        coarse = GridGeometry(4, 4)
        resampled = decode_field_stats(vae, samples, np.zeros(2), source=geom, target=coarse)
        assert resampled.mean_field.shape == (16,)

    def test_stat_difference(self):
        assert stat_difference([3.0, 4.0], [0.0, 0.0]) == 5.0


class TestFieldMetrics:
    def test_dice(self):
        healthy = np.full(6, 0.15)
        assert dice(healthy, healthy) == 1.0
        truth = np.array([0.5, 0.5, 0.15, 0.15, 0.15, 0.15])
        assert dice(truth, truth) == 1.0
        assert dice(healthy, truth) == 0.0
        shifted = np.array([0.15, 0.5, 0.5, 0.15, 0.15, 0.15])
        assert dice(shifted, truth) == pytest.approx(0.5)

    def test_rmse_and_cc(self):
        truth = np.array([0.1, 0.2, 0.3, 0.4])
        assert rmse(truth + 0.1, truth) == pytest.approx(0.1)
        assert cc(2 * truth + 1, truth) == pytest.approx(1.0)
        assert cc(-truth, truth) == pytest.approx(-1.0)
        with pytest.raises(UndefinedCorrelationError):
            cc(np.full(4, 0.15), truth)

    def test_field_metrics_tolerates_constant_estimate(self):
        truth = np.array([0.5, 0.15, 0.15, 0.15])
        metrics = field_metrics(np.full(4, 0.15), truth)
        assert np.isnan(metrics["cc"])
        assert metrics["dice"] == 0.0


class TestCoverage:
    def test_coverage_of_same_distribution(self, rng):
        kde = kde_fit(rng.standard_normal((2_000, 2)))
        inside = coverage_fraction(rng.standard_normal((2_000, 2)), kde)
        assert inside == pytest.approx(0.99, abs=0.03)
        assert coverage_fraction(np.full((5, 2), 10.0), kde) == 0.0
        assert np.isnan(coverage_fraction(np.zeros((0, 2)), kde))


class TestAggregation:
    def test_aggregate_ignores_nan(self):
        assert aggregate([1.0, 3.0, float("nan")]) == {"mean": 2.0, "std": 1.0, "n": 2}
        assert aggregate([float("nan")])["n"] == 0

    def test_paired_t_test(self, rng):
        a = rng.normal(size=8)
        b = a + 0.3 + 0.1 * rng.normal(size=8)
        res = paired_t_test(a.tolist(), b.tolist())
        ref = ttest_rel(a, b)
        assert res["statistic"] == pytest.approx(ref.statistic)
        assert res["pvalue"] == pytest.approx(ref.pvalue)
        assert res["n"] == 8
        assert np.isnan(paired_t_test([1.0, 2.0], [1.0, 2.0])["pvalue"])
