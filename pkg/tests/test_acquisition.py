"""Tests for log-normal acquisitions, UCB and the acquisition maximizer."""

import numpy as np
import pytest

from backend.inference.acquisition import (
    AcquisitionKind,
    SearchBox,
    acquisition_surface,
    evaluate_acquisition,
    evaluate_acquisition_batch,
    log_lognormal_variance,
    lognormal_entropy,
    lognormal_variance,
    maximize_acquisition,
    save_grid_csv,
    ucb,
)
from backend.inference.gp_surrogate import GpTrainingSet, KernelHyperparams, gp_fit, gp_predict


_moments = np.random.default_rng(2024)
RANDOM_MOMENTS = list(zip(_moments.uniform(-1.0, 1.0, 10), _moments.uniform(0.05, 1.0, 10)))


@pytest.fixture
def peaked_gp(rng):
    """GP fitted to a Gaussian log-density centred at (1, -0.5)"""
    Z = rng.uniform(-4, 4, (30, 2))
    y = -0.5 * np.sum((Z - np.array([1.0, -0.5])) ** 2, axis=1)
    return gp_fit(GpTrainingSet(Z, y), KernelHyperparams(50.0, np.array([0.1, 0.1]), 1e-6))


class TestClosedForms:
    def test_standard_values(self):
        assert lognormal_entropy(0.0, 1.0) == pytest.approx(1.418939, abs=1e-6)
        assert lognormal_variance(0.0, 1.0) == pytest.approx(4.670774, abs=1e-6)
        assert ucb(1.0, 4.0, 2.0) == 5.0

    @pytest.mark.parametrize("mu, var", RANDOM_MOMENTS)
    def test_entropy_matches_monte_carlo(self, mu, var):
        log_y = mu + np.sqrt(var) * np.random.default_rng(11).standard_normal(1_000_000)
        log_p = -log_y - 0.5 * np.log(2 * np.pi * var) - (log_y - mu) ** 2 / (2 * var)
        assert lognormal_entropy(mu, var) == pytest.approx(-log_p.mean(), rel=0.02, abs=0.01)

    @pytest.mark.parametrize("mu, var", RANDOM_MOMENTS)
    def test_variance_matches_monte_carlo(self, mu, var):
        y = np.exp(mu + np.sqrt(var) * np.random.default_rng(12).standard_normal(2_000_000))
        assert lognormal_variance(mu, var) == pytest.approx(y.var(), rel=0.05)

    def test_monotone_in_mean_and_variance(self):
        var = np.linspace(0.01, 5.0, 50)
        assert np.all(np.diff(lognormal_entropy(0.0, var)) > 0)
        assert np.all(np.diff(lognormal_variance(0.0, var)) > 0)
        mu = np.linspace(-3, 3, 50)
        assert np.all(np.diff(lognormal_entropy(mu, 1.0)) > 0)
        assert np.all(np.diff(lognormal_variance(mu, 1.0)) > 0)

    def test_log_variance_is_stable(self):
        value = log_lognormal_variance(1000.0, 2.0)
        assert value == pytest.approx(np.log(np.expm1(2.0)) + 2002.0, rel=1e-12)
        assert np.isinf(lognormal_variance(1000.0, 2.0))
        small = log_lognormal_variance(0.0, 1e-12)
        assert small == pytest.approx(np.log(1e-12), rel=1e-6)

    def test_rejects_non_positive_variance(self):
        with pytest.raises(ValueError):
            lognormal_entropy(0.0, 0.0)
        with pytest.raises(ValueError):
            log_lognormal_variance(0.0, -1.0)


class TestAcquisitionKind:
    def test_validation(self):
        with pytest.raises(ValueError):
            AcquisitionKind("expected_improvement")
        with pytest.raises(ValueError):
            AcquisitionKind.ucb(0.0)
        assert AcquisitionKind.ucb(3.0).to_dict() == {"name": "ucb", "kappa": 3.0}


class TestSearchBox:
    def test_grid_order_and_clip(self):
        box = SearchBox.symmetric(2, 1.0)
        axes, points = box.grid(3)
        assert points.shape == (9, 2)
        np.testing.assert_array_equal(points[1], [-1.0, 0.0])
        np.testing.assert_array_equal(box.clip(np.array([2.0, -0.5])), [1.0, -0.5])
        assert box.contains(np.zeros(2))
        assert not box.contains(np.array([0.0, 1.5]))

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            SearchBox(np.array([1.0]), np.array([0.0]))


class TestMaximize:
    @pytest.mark.parametrize("kind", [AcquisitionKind.entropy(), AcquisitionKind.variance(), AcquisitionKind.ucb()])
    def test_beats_grid_oracle_and_stays_in_box(self, peaked_gp, kind, rng):
        box = SearchBox.symmetric(2, 4.0)
        z = maximize_acquisition(peaked_gp, kind, box, rng)
        assert box.contains(z)
        value = evaluate_acquisition(peaked_gp, kind, z)

        _, coarse = box.grid(41)
        assert value >= evaluate_acquisition_batch(peaked_gp, kind, coarse).max() - 1e-12
        _, fine = box.grid(101)
        fine_max = evaluate_acquisition_batch(peaked_gp, kind, fine).max()
        assert value >= fine_max - 0.05 * max(1.0, abs(fine_max))

    def test_ties_go_to_first_grid_point(self, rng):
        gp = gp_fit(GpTrainingSet.empty(2), KernelHyperparams(1.0, np.ones(2)))
        box = SearchBox.symmetric(2, 2.0)
        z = maximize_acquisition(gp, AcquisitionKind.ucb(), box, rng)
        np.testing.assert_array_equal(z, box.lower)

    def test_variance_score_is_log_of_variance(self, peaked_gp):
        z = np.array([[0.2, 0.3]])
        log_score = evaluate_acquisition_batch(peaked_gp, AcquisitionKind.variance(), z)[0]
        mu, var = gp_predict(peaked_gp, z[0])
        assert np.exp(log_score) == pytest.approx(lognormal_variance(mu, var), rel=1e-9)


def test_surface_and_csv(peaked_gp, tmp_path):
    box = SearchBox.symmetric(2, 4.0)
    kind = AcquisitionKind.entropy()
    axes, values = acquisition_surface(peaked_gp, kind, box, resolution=11)
    assert values.shape == (11, 11)
    assert values[3, 7] == pytest.approx(evaluate_acquisition(peaked_gp, kind, np.array([axes[0][3], axes[1][7]])))

    save_grid_csv(tmp_path / "acq.csv", axes, values, "acquisition")
    lines = (tmp_path / "acq.csv").read_text().splitlines()
    assert lines[0] == "z1,z2,acquisition"
    assert len(lines) == 1 + 121


class TestInvariances:
    @pytest.mark.parametrize("kind", [AcquisitionKind.entropy(), AcquisitionKind.variance(), AcquisitionKind.ucb()])
    def test_maximizer_ignores_training_order(self, peaked_gp, kind):
        ts = peaked_gp.training_set
        order = np.random.default_rng(8).permutation(len(ts))
        shuffled = gp_fit(GpTrainingSet(ts.inputs[order], ts.targets[order]), peaked_gp.hyperparams)
        box = SearchBox.symmetric(2, 4.0)
        a = maximize_acquisition(peaked_gp, kind, box, np.random.default_rng(5))
        b = maximize_acquisition(shuffled, kind, box, np.random.default_rng(5))
        np.testing.assert_allclose(a, b, atol=1e-6)

    @pytest.mark.parametrize("kind", [AcquisitionKind.entropy(), AcquisitionKind.variance(), AcquisitionKind.ucb()])
    def test_unvisited_point_beats_visited_point(self, kind):
        Z = np.array([[-1.0, -1.0], [0.0, 0.5], [1.0, -0.5]])
        hp = KernelHyperparams(4.0, np.ones(2), 1e-6)
        gp = gp_fit(GpTrainingSet(Z, np.zeros(3)), hp)
        far = np.array([30.0, 30.0])
        mu_far, var_far = gp_predict(gp, far)
        mu_seen, var_seen = gp_predict(gp, Z[1])
        assert mu_far == pytest.approx(mu_seen, abs=1e-6)
        assert var_far == pytest.approx(hp.amplitude2) and var_seen < 1e-3
        assert evaluate_acquisition(gp, kind, far) > evaluate_acquisition(gp, kind, Z[1])
