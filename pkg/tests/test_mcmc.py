"""Tests for MH, two-stage MH, proposal tuning and chain diagnostics."""

import numpy as np
import pytest

from backend.errors import DimensionMismatchError
from backend.inference.mcmc import (
    ProposalSpec,
    gelman_rubin,
    geweke,
    load_sample_set,
    mh_chain,
    run_reference_mcmc,
    run_two_stage_mcmc,
    save_sample_set,
    tune_proposal,
    two_stage_mh,
)


def std_normal(z):
    return -0.5 * float(np.sum(z * z))


class TestProposal:
    def test_isotropic_scale(self):
        prop = ProposalSpec.isotropic(3, 0.4)
        assert prop.dim == 3
        assert prop.scale == pytest.approx(0.4)

    def test_rejects_bad_covariance(self):
        with pytest.raises(ValueError):
            ProposalSpec(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            ProposalSpec.isotropic(2, 0.0)


class TestMetropolisHastings:
    def test_standard_normal_moments(self):
        chain = mh_chain(std_normal, np.zeros(2), ProposalSpec.isotropic(2, 1.7), 50_000, np.random.default_rng(0))
        kept = chain.samples[5_000:]
        np.testing.assert_allclose(kept.mean(axis=0), 0.0, atol=0.06)
        np.testing.assert_allclose(kept.var(axis=0), 1.0, atol=0.1)
        assert 0.1 < chain.acceptance_rate < 0.7

    def test_constant_density_accepts_everything(self, rng):
        chain = mh_chain(lambda z: 0.0, np.zeros(2), ProposalSpec.isotropic(2, 1.0), 500, rng)
        assert chain.acceptance_rate == 1.0

    def test_zero_density_region_never_entered(self, rng):
        def box_logpdf(z):
            return 0.0 if np.all(np.abs(z) <= 1.0) else -np.inf

        chain = mh_chain(box_logpdf, np.zeros(2), ProposalSpec.isotropic(2, 0.8), 2_000, rng)
        assert np.all(np.abs(chain.samples) <= 1.0)

    def test_reproducible(self):
        a = mh_chain(std_normal, np.ones(2), ProposalSpec.isotropic(2, 1.0), 300, np.random.default_rng(9))
        b = mh_chain(std_normal, np.ones(2), ProposalSpec.isotropic(2, 1.0), 300, np.random.default_rng(9))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_invalid_start(self, rng):
        prop = ProposalSpec.isotropic(2, 1.0)
        with pytest.raises(ValueError):
            mh_chain(lambda z: -np.inf, np.zeros(2), prop, 10, rng)
        with pytest.raises(DimensionMismatchError):
            mh_chain(std_normal, np.zeros(3), prop, 10, rng)
        with pytest.raises(ValueError):
            mh_chain(std_normal, np.zeros(2), prop, 0, rng)


class TestTuning:
    def test_acceptance_lands_near_target(self):
        rng = np.random.default_rng(1)
        prop = tune_proposal(std_normal, np.zeros(2), rng, pilot_length=5_000, tolerance=0.02)
        chain = mh_chain(std_normal, np.zeros(2), prop, 20_000, rng)
        assert 0.17 <= chain.acceptance_rate <= 0.27

    def test_invalid_target_rate(self, rng):
        with pytest.raises(ValueError):
            tune_proposal(std_normal, np.zeros(2), rng, target_rate=1.0)


class TestTwoStage:
    def test_exact_surrogate_reproduces_plain_chain(self):
        prop = ProposalSpec.isotropic(2, 1.2)
        init = np.array([0.5, -0.5])
        plain = mh_chain(std_normal, init, prop, 2_000, np.random.default_rng(3))
        staged = two_stage_mh(std_normal, std_normal, init, prop, 2_000, np.random.default_rng(3))
        np.testing.assert_array_equal(staged.samples, plain.samples)
        np.testing.assert_array_equal(staged.accepted, plain.accepted)
        assert staged.n_evaluations < 2_000
        assert staged.n_surrogate_evaluations == 2_001

    def test_biased_surrogate_keeps_exact_target(self):
        def biased(z):
            return -0.5 * float(np.sum(((z - 0.5) / 1.5) ** 2))

        chain = two_stage_mh(std_normal, biased, np.zeros(1), ProposalSpec.isotropic(1, 2.0), 60_000, np.random.default_rng(4))
        kept = chain.samples[5_000:, 0]
        assert kept.mean() == pytest.approx(0.0, abs=0.08)
        assert kept.var() == pytest.approx(1.0, abs=0.15)
        assert chain.n_evaluations < 60_000

    def test_surrogate_must_be_finite_at_start(self, rng):
        def cut_off(z):
            return 0.0 if z[0] > 0.0 else -np.inf

        with pytest.raises(ValueError):
            two_stage_mh(std_normal, cut_off, np.array([-0.5]), ProposalSpec.isotropic(1, 1.0), 100, rng)


class TestGelmanRubin:
    def test_identical_chains_are_degenerate(self, rng):
        c = rng.standard_normal((200, 2))
        rhat, degenerate = gelman_rubin([c, c.copy()])
        assert degenerate
        np.testing.assert_array_equal(rhat, 1.0)

    def test_same_target_near_one(self, rng):
        chains = [rng.standard_normal((2_000, 2)) for _ in range(3)]
        rhat, degenerate = gelman_rubin(chains)
        assert not degenerate
        assert np.all(rhat >= 1.0) and np.all(rhat < 1.05)

    def test_divergent_chains_flagged(self, rng):
        rhat, _ = gelman_rubin([rng.standard_normal((500, 1)), 5.0 + rng.standard_normal((500, 1))])
        assert rhat[0] > 1.5

    def test_input_checks(self, rng):
        with pytest.raises(ValueError):
            gelman_rubin([rng.standard_normal((100, 1))])
        with pytest.raises(ValueError):
            gelman_rubin([rng.standard_normal((5, 1)), rng.standard_normal((5, 1))])


class TestGeweke:
    def test_iid_chain(self, rng):
        z, degenerate = geweke(rng.standard_normal((4_000, 2)))
        assert not degenerate
        assert np.all(np.abs(z) < 4.0)

    def test_drifting_chain(self, rng):
        drift = np.linspace(0.0, 5.0, 2_000)[:, None] + 0.1 * rng.standard_normal((2_000, 1))
        z, _ = geweke(drift)
        assert abs(z[0]) > 4.0

    def test_constant_chain(self):
        z, degenerate = geweke(np.ones((500, 1)))
        assert degenerate
        assert z[0] == 0.0

    def test_short_chain(self, rng):
        with pytest.raises(ValueError):
            geweke(rng.standard_normal(50))


class TestProtocol:
    def test_reference_keeps_eight_thousand(self):
        ss = run_reference_mcmc(std_normal, ProposalSpec.isotropic(2, 1.7), np.random.default_rng(5))
        assert ss.samples.shape == (8_000, 2)
        assert ss.n_evaluations == 20_000
        assert ss.n_init_evaluations == 2
        assert ss.diagnostics is not None
        assert np.all(ss.diagnostics.gelman_rubin < 1.1)
        assert ss.metadata["thin"] == 2

    def test_two_stage_protocol(self, tmp_path):
        ss = run_two_stage_mcmc(
            std_normal, std_normal, ProposalSpec.isotropic(2, 1.7), np.random.default_rng(6), chain_length=1_000
        )
        assert ss.samples.shape == (800, 2)
        assert ss.n_evaluations < 2_000
        assert ss.n_surrogate_evaluations == 2 * 1_001

        save_sample_set(tmp_path, "two_stage", ss)
        loaded = load_sample_set(tmp_path, "two_stage")
        np.testing.assert_array_equal(loaded.samples, ss.samples)
        assert loaded.n_evaluations == ss.n_evaluations
        np.testing.assert_allclose(loaded.diagnostics.gelman_rubin, ss.diagnostics.gelman_rubin)

    def test_short_chains_skip_diagnostics(self):
        ss = run_reference_mcmc(std_normal, ProposalSpec.isotropic(2, 1.0), np.random.default_rng(7), chain_length=50)
        assert ss.diagnostics is None
        assert len(ss) == 40
