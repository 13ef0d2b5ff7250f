"""Tests for the Matern 5/2 GP surrogate."""

import numpy as np
import pytest

from backend.inference.gp_surrogate import (
    GpTrainingSet,
    KernelHyperparams,
    default_hyperparams,
    gp_fit,
    gp_predict,
    gp_predict_batch,
    kernel_matrix,
    log_marginal_likelihood,
    matern52,
    optimize_hyperparams,
)


@pytest.fixture
def training_set(rng):
    Z = rng.uniform(-3, 3, (12, 2))
    y = np.sin(Z[:, 0]) + 0.5 * Z[:, 1] ** 2
    return GpTrainingSet(Z, y)


@pytest.fixture
def hp():
    return KernelHyperparams(2.0, np.array([0.5, 1.5]), 1e-2)


class TestKernel:
    def test_value_at_zero_and_decay(self, hp):
        z = np.array([0.3, -1.0])
        assert matern52(z, z, hp) == pytest.approx(2.0)
        near = matern52(z, z + [0.1, 0.0], hp)
        far = matern52(z, z + [2.0, 0.0], hp)
        assert 2.0 > near > far > 0.0

    def test_closed_form(self, hp):
        zi, zj = np.array([0.0, 0.0]), np.array([1.0, 1.0])
        d = np.sqrt(0.5 + 1.5)
        expected = 2.0 * np.exp(-np.sqrt(5) * d) * (1 + np.sqrt(5) * d + 5.0 / 3.0 * d ** 2)
        assert matern52(zi, zj, hp) == pytest.approx(expected, rel=1e-12)

    def test_matrix_symmetric_positive_semidefinite(self, training_set, hp):
        K = kernel_matrix(training_set.inputs, training_set.inputs, hp)
        np.testing.assert_allclose(K, K.T, atol=1e-14)
        assert np.linalg.eigvalsh(K).min() > -1e-10

    def test_dimension_mismatch(self, hp):
        with pytest.raises(ValueError):
            matern52(np.zeros(2), np.zeros(3), hp)

    def test_hyperparam_validation(self):
        with pytest.raises(ValueError):
            KernelHyperparams(0.0, np.ones(2))
        with pytest.raises(ValueError):
            KernelHyperparams(1.0, np.array([1.0, -1.0]))
        with pytest.raises(ValueError):
            KernelHyperparams(1.0, np.ones(2), noise_var=0.0)


class TestPosterior:
    def test_matches_dense_inverse(self, training_set, hp, rng):
        gp = gp_fit(training_set, hp)
        Zs = rng.uniform(-3, 3, (25, 2))
        mu, var = gp_predict_batch(gp, Zs)

        X, y = training_set.inputs, training_set.targets
        Kinv = np.linalg.inv(kernel_matrix(X, X, hp) + hp.noise_var * np.eye(len(X)))
        ks = kernel_matrix(X, Zs, hp)
        np.testing.assert_allclose(mu, ks.T @ Kinv @ y, atol=1e-8)
        np.testing.assert_allclose(var, hp.amplitude2 - np.sum(ks * (Kinv @ ks), axis=0), atol=1e-8)

    def test_interpolates_with_small_noise(self, training_set):
        hp = KernelHyperparams(2.0, np.array([0.5, 1.5]), 1e-10)
        gp = gp_fit(training_set, hp)
        mu, var = gp_predict(gp, training_set.inputs[3])
        assert mu == pytest.approx(training_set.targets[3], abs=1e-4)
        assert 0.0 <= var < 1e-6

    def test_empty_set_returns_prior(self, hp):
        gp = gp_fit(GpTrainingSet.empty(2), hp)
        mu, var = gp_predict(gp, np.zeros(2))
        assert mu == 0.0
        assert var == hp.amplitude2

    def test_variance_never_negative(self, training_set, hp, rng):
        gp = gp_fit(training_set, hp)
        _, var = gp_predict_batch(gp, np.vstack([training_set.inputs, rng.uniform(-3, 3, (50, 2))]))
        assert np.all(var >= 0.0)


class TestTrainingSet:
    def test_rejects_duplicates(self, training_set):
        with pytest.raises(ValueError):
            training_set.append(training_set.inputs[0], 1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            GpTrainingSet(np.zeros((1, 2)), np.array([np.nan]))

    def test_contains_and_dict_round_trip(self, training_set):
        assert training_set.contains(training_set.inputs[5])
        assert not training_set.contains(np.array([10.0, 10.0]))
        again = GpTrainingSet.from_dict(training_set.to_dict())
        np.testing.assert_array_equal(again.inputs, training_set.inputs)
        assert GpTrainingSet.from_dict(GpTrainingSet.empty(3).to_dict()).dim == 3


class TestHyperparams:
    def test_log_marginal_likelihood_closed_form(self, training_set, hp):
        X, y = training_set.inputs, training_set.targets
        C = kernel_matrix(X, X, hp) + hp.noise_var * np.eye(len(X))
        _, logdet = np.linalg.slogdet(C)
        expected = -0.5 * y @ np.linalg.solve(C, y) - 0.5 * logdet - 0.5 * len(X) * np.log(2 * np.pi)
        assert log_marginal_likelihood(training_set, hp) == pytest.approx(expected, rel=1e-9)

    def test_optimum_never_worse_than_start(self, training_set, rng):
        init = default_hyperparams(training_set, np.array([6.0, 6.0]))
        best = optimize_hyperparams(training_set, init, rng, n_restarts=3)
        assert log_marginal_likelihood(training_set, best) >= log_marginal_likelihood(training_set, init) - 1e-9

    def test_needs_three_points(self, hp):
        ts = GpTrainingSet(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            optimize_hyperparams(ts, hp)

    def test_dict_round_trip(self, hp):
        again = KernelHyperparams.from_dict(hp.to_dict())
        np.testing.assert_allclose(again.to_log_vector(), hp.to_log_vector())

    def test_log_marginal_likelihood_ignores_point_order(self, training_set, hp, rng):
        order = rng.permutation(len(training_set))
        shuffled = GpTrainingSet(training_set.inputs[order], training_set.targets[order])
        assert log_marginal_likelihood(shuffled, hp) == pytest.approx(log_marginal_likelihood(training_set, hp), rel=1e-10)

    def test_recovers_length_scale_of_a_gp_draw(self):
        rng = np.random.default_rng(17)
        truth = KernelHyperparams(1.0, np.array([1.0, 1.0]), 1e-4)
        Z = rng.uniform(-4, 4, (80, 2))
        C = kernel_matrix(Z, Z, truth) + truth.noise_var * np.eye(len(Z))
        y = np.linalg.cholesky(C) @ rng.standard_normal(len(Z))
        ts = GpTrainingSet(Z, y)

        best = optimize_hyperparams(ts, default_hyperparams(ts), np.random.default_rng(0))
        ratio = np.sqrt(truth.inv_lengthscale2 / best.inv_lengthscale2)
        assert np.all((ratio > 1.0 / 3.0) & (ratio < 3.0))

    def test_search_is_deterministic_per_seed(self, training_set):
        init = default_hyperparams(training_set, np.array([6.0, 6.0]))
        a = optimize_hyperparams(training_set, init, np.random.default_rng(3), n_restarts=3)
        b = optimize_hyperparams(training_set, init, np.random.default_rng(3), n_restarts=3)
        np.testing.assert_array_equal(a.to_log_vector(), b.to_log_vector())


def test_refit_after_append_matches_fit_from_scratch(training_set, hp, rng):
    z_new = np.array([0.25, -2.5])
    grown = gp_fit(training_set.append(z_new, 1.3), hp)
    scratch = gp_fit(
        GpTrainingSet(np.vstack([training_set.inputs, z_new]), np.append(training_set.targets, 1.3)), hp
    )
    Zs = rng.uniform(-3, 3, (30, 2))
    for got, want in zip(gp_predict_batch(grown, Zs), gp_predict_batch(scratch, Zs)):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)
