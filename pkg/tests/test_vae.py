"""Tests for the numpy VAE: forward passes, ELBO gradients, Adam and checkpoints."""

import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from backend.errors import ModelCorruptError, VaeTrainingError
from backend.inference.vae import (
    AdamState,
    TrainConfig,
    TrainResult,
    VaeModel,
    checkpoint_files,
    decode_mean,
    elbo_loss,
    elbo_terms,
    encode,
    kl_to_prior,
    load_checkpoint,
    reconstruction_rmse,
    save_checkpoint,
    split_dataset,
    train_vae,
)
from backend.simulation.data_gen import default_size_range, generate_training_set
from backend.simulation.forward_model import GridGeometry
from config.experiment_config import ExperimentConfig


def latent_size_correlation(model, geom, count, seed):
    """Spearman rank correlation between |mu_z| and lesion size on freshly drawn fields"""
    held_out = generate_training_set(geom, count, default_size_range(geom), np.random.default_rng(seed))
    mu, _ = encode(model, held_out.fields)
    return spearmanr(np.linalg.norm(mu, axis=1), held_out.lesion_sizes).statistic


@pytest.fixture
def mini_model():
    rng = np.random.default_rng(0)
    model = VaeModel.initialize(12, 8, 2, rng)
    for key in model.params:
        if key.endswith("_b"):
            model.params[key] = 0.1 * rng.standard_normal(model.params[key].shape)
    return model


class TestForward:
    def test_decoder_range(self, mini_model, rng):
        Z = 5.0 * rng.standard_normal((200, 2))
        fields = decode_mean(mini_model, Z)
        assert fields.shape == (200, 12)
        assert np.all((fields > 0.0) & (fields < 0.5))

    def test_encode_shapes(self, mini_model, rng):
        mu, logvar = encode(mini_model, rng.uniform(0, 0.5, 12))
        assert mu.shape == (2,) and logvar.shape == (2,)
        mu, logvar = encode(mini_model, rng.uniform(0, 0.5, (4, 12)))
        assert mu.shape == (4, 2) and logvar.shape == (4, 2)

    def test_corrupt_model_detected(self, mini_model):
        bad = mini_model.copy()
        bad.params["enc1_W"][0, 0] = np.nan
        with pytest.raises(ModelCorruptError):
            encode(bad, np.full(12, 0.2))
        with pytest.raises(ModelCorruptError):
            bad.check()

    def test_kl_to_prior(self):
        assert kl_to_prior(np.zeros(2), np.zeros(2)) == 0.0
        np.testing.assert_allclose(kl_to_prior(np.array([1.0, 0.0]), np.zeros(2)), 0.5)


class TestElbo:
    def test_loss_matches_terms(self, mini_model, rng):
        X = rng.uniform(0, 0.5, (5, 12))
        eps = rng.standard_normal((5, 2))
        loss, _ = elbo_loss(mini_model, X, rng, eps=eps)
        kl, rec = elbo_terms(mini_model, X, eps)
        np.testing.assert_allclose(loss, kl + rec, rtol=1e-12)

    def test_gradients_match_finite_differences(self, mini_model):
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 0.5, (5, 12))
        eps = rng.standard_normal((5, 2))
        _, grads = elbo_loss(mini_model, X, rng, eps=eps)
        h = 1e-5
        for name, param in mini_model.params.items():
            numeric = np.zeros_like(param)
            for idx in np.ndindex(param.shape):
                original = param[idx]
                param[idx] = original + h
                up = sum(elbo_terms(mini_model, X, eps))
                param[idx] = original - h
                down = sum(elbo_terms(mini_model, X, eps))
                param[idx] = original
                numeric[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-8, err_msg=name)

    def test_non_finite_loss_raises(self, mini_model, rng):
        bad = mini_model.copy()
        bad.params["dec2_b"][:] = np.nan
        with pytest.raises(VaeTrainingError):
            elbo_loss(bad, rng.uniform(0, 0.5, (2, 12)), rng)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.01)
        params = {"w": np.array([1.0, -2.0, 3.0])}
        adam = AdamState(params, cfg)
        adam.step(params, {"w": np.array([0.5, -4.0, 0.0])})
        np.testing.assert_allclose(params["w"], [0.99, -1.99, 3.0], atol=1e-6)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(validation_fraction=1.0)


class TestTraining:
    def test_split_dataset(self, rng):
        data = np.arange(40, dtype=float).reshape(20, 2)
        train, val = split_dataset(data, 0.1, rng)
        assert train.shape == (18, 2) and val.shape == (2, 2)
        np.testing.assert_array_equal(np.sort(np.vstack([train, val]).ravel()), np.arange(40))

    @pytest.mark.slow
    def test_loss_decreases_and_checkpoint_round_trips(self, tmp_path):
        geom = GridGeometry(8, 8)
        ts = generate_training_set(geom, 200, default_size_range(geom), np.random.default_rng(4))
        cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=60, hidden=32, d_z=2, seed=11)
        result = train_vae(ts.fields, cfg)
        assert len(result.loss_history) == 60
        assert result.loss_history[-1] < result.loss_history[0]
        assert result.validation_rmse is not None and result.validation_rmse < 0.25
        assert latent_size_correlation(result.model, geom, 200, seed=99) > 0.3

        again = train_vae(ts.fields, cfg)
        np.testing.assert_array_equal(again.model.params["dec2_W"], result.model.params["dec2_W"])

        save_checkpoint(tmp_path, result, cfg)
        loaded = load_checkpoint(tmp_path)
        for key, value in result.model.params.items():
            np.testing.assert_array_equal(loaded.params[key], value)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["validation_rmse"] == result.validation_rmse
        np.testing.assert_allclose(reconstruction_rmse(loaded, ts.fields[:10]), reconstruction_rmse(result.model, ts.fields[:10]))

    def test_checkpoint_bytes_are_reproducible(self, mini_model, tmp_path):
        result = TrainResult(mini_model, [1.0], 0.1)
        save_checkpoint(tmp_path / "a", result, TrainConfig())
        save_checkpoint(tmp_path / "b", result, TrainConfig())
        for a, b in zip(checkpoint_files(tmp_path / "a", mini_model), checkpoint_files(tmp_path / "b", mini_model)):
            assert a.read_bytes() == b.read_bytes()

        checkpoint_files(tmp_path / "a", mini_model)[0].unlink()
        with pytest.raises(ModelCorruptError):
            load_checkpoint(tmp_path / "a")

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_vae(np.zeros((0, 4)), TrainConfig(epochs=1, hidden=4))


@pytest.mark.full_scale
def test_bundled_scale_reconstruction_and_latent_semantics():
    cfg = ExperimentConfig()
    geom = cfg.vae_geometry()
    ts = generate_training_set(geom, cfg.training_set.count, cfg.size_range(), np.random.default_rng(cfg.seed))
    result = train_vae(ts.fields, cfg.train_config())
    assert reconstruction_rmse(result.model, ts.fields[:500]) < 0.08
    assert latent_size_correlation(result.model, geom, 500, seed=cfg.seed + 1) > 0.3
