"""Predictor-Corrector sampler: reverse dynamics against analytic-score
oracles, conditioning fidelity, guidance wiring."""

import numpy as np
import pytest

from modalsde.errors import ConfigError, DimensionError
from modalsde.guidance import EnergyNetwork
from modalsde.rng import child_rng
from modalsde.sampler import (
    ModalityMask,
    SamplerConfig,
    apply_guidance,
    corrector_step,
    pc_sample,
    pc_sample_batch,
    predictor_step,
)
from modalsde.sde import BlockLayout, VPSDESchedule


def standard_normal_score(z, t):
    """Analytic score of unit-variance data under the VP kernel: the marginal
    at every t is N(0, alpha^2 + sigma^2) = N(0, 1), so the score is -z."""
    return -np.asarray(z)


def make_gaussian_score(cov: np.ndarray, schedule: VPSDESchedule):
    def score(z, t):
        alpha = np.exp(-0.5 * schedule.beta_integral(t))
        cov_t = alpha**2 * cov + (1.0 - alpha**2) * np.eye(cov.shape[0])
        return -np.atleast_2d(z) @ np.linalg.inv(cov_t).T

    return score


class TestPredictorStep:
    def test_null_dynamics_when_beta_vanishes(self, rng):
        """With a zero score and beta -> 0, drift and diffusion vanish and the
        state is unchanged (up to the infinitesimal beta floor)."""
        schedule = VPSDESchedule(beta_min=1e-15, beta_max=1e-15, n_steps=1)
        z = rng.standard_normal((4, 2))
        out = predictor_step(lambda zz, tt: np.zeros_like(zz), schedule, z, 1, rng)
        np.testing.assert_allclose(out, z, atol=1e-12)

    def test_final_step_omits_noise(self, rng):
        """Step index 1 (into t = 0) is deterministic given the state."""
        schedule = VPSDESchedule(n_steps=10)
        z = rng.standard_normal((3, 2))
        a = predictor_step(standard_normal_score, schedule, z.copy(), 1, child_rng(0, "a"))
        b = predictor_step(standard_normal_score, schedule, z.copy(), 1, child_rng(1, "b"))
        np.testing.assert_array_equal(a, b)

    def test_intermediate_steps_are_stochastic(self, rng):
        schedule = VPSDESchedule(n_steps=10)
        z = rng.standard_normal((3, 2))
        a = predictor_step(standard_normal_score, schedule, z.copy(), 5, child_rng(0, "a"))
        b = predictor_step(standard_normal_score, schedule, z.copy(), 5, child_rng(1, "b"))
        assert not np.array_equal(a, b)

    def test_step_index_bounds(self, rng):
        schedule = VPSDESchedule(n_steps=10)
        with pytest.raises(ConfigError):
            predictor_step(standard_normal_score, schedule, np.zeros(2), 0, rng)
        with pytest.raises(ConfigError):
            predictor_step(standard_normal_score, schedule, np.zeros(2), 11, rng)

    def test_full_reverse_recovers_standard_normal(self):
        """10^4 reverse trajectories with the analytic N(0,1)-data score land
        on mean within 0.05 and variance within [0.9, 1.1]."""
        schedule = VPSDESchedule()
        rng = child_rng(5, "reverse")
        z = rng.standard_normal((10_000, 1))
        for i in range(schedule.n_steps, 0, -1):
            z = predictor_step(standard_normal_score, schedule, z, i, rng)
        assert abs(z.mean()) < 0.05
        assert 0.9 <= z.var() <= 1.1

    def test_deterministic_given_seed(self):
        schedule = VPSDESchedule(n_steps=20)
        outs = []
        for _ in range(2):
            rng = child_rng(9, "det")
            z = rng.standard_normal((8, 2))
            for i in range(20, 0, -1):
                z = predictor_step(standard_normal_score, schedule, z, i, rng)
            outs.append(z)
        np.testing.assert_array_equal(outs[0], outs[1])


class TestCorrectorStep:
    def test_zero_score_skips_update(self, rng):
        z = rng.standard_normal((5, 3))
        out = corrector_step(lambda zz, tt: np.zeros_like(zz), z, 0.5, 0.16, rng)
        np.testing.assert_array_equal(out, z)

    def test_update_matches_formula_with_replayed_noise(self):
        """z' = z + eta s + sqrt(2 eta) eps with eta = 2 (r |eps|/|s|)^2 (batch
        mean norms); doubling r quadruples the drift term."""
        z = np.array([[1.0, -2.0]])
        s0 = np.array([[0.5, 0.25]])
        drifts = {}
        for r in (0.16, 0.32):
            rng = child_rng(3, "corr")
            eps = child_rng(3, "corr").standard_normal(z.shape)  # replay the draw
            out = corrector_step(lambda zz, tt: s0, z, 0.5, r, rng)
            eta = 2.0 * (r * np.linalg.norm(eps) / np.linalg.norm(s0)) ** 2
            np.testing.assert_allclose(out, z + eta * s0 + np.sqrt(2 * eta) * eps, rtol=1e-12)
            drifts[r] = eta * s0
        np.testing.assert_allclose(drifts[0.32], 4.0 * drifts[0.16], rtol=1e-12)

    def test_repeated_correction_reaches_the_bulk(self):
        """Langevin refinement targeting N(0,1) from far away (z = 5): after
        500 iterations the chains live in the target's bulk. At stationarity
        P(|z| < 3) is about 0.997, so 0.99 over 1000 chains is the honest
        bound; the variance lands near 1."""
        rng = child_rng(11, "langevin")
        z = np.full((1000, 1), 5.0)
        for _ in range(500):
            z = corrector_step(standard_normal_score, z, 0.01, 0.16, rng)
        assert np.mean(np.abs(z) < 3.0) > 0.99
        assert 0.8 <= z.var() <= 1.25

    def test_invalid_snr_rejected(self, rng):
        with pytest.raises(ConfigError):
            corrector_step(standard_normal_score, np.zeros((1, 1)), 0.5, 0.0, rng)


class TestSamplerConfig:
    def test_validation(self):
        SamplerConfig()
        with pytest.raises(ConfigError):
            SamplerConfig(n_steps=0)
        with pytest.raises(ConfigError):
            SamplerConfig(corrector_steps=-1)
        with pytest.raises(ConfigError):
            SamplerConfig(corrector_steps=1, snr=0.0)
        with pytest.raises(ConfigError):
            SamplerConfig(guidance_mode="sideways")
        with pytest.raises(ConfigError):
            SamplerConfig(guidance_scale=-1.0)


class TestPcSample:
    schedule = VPSDESchedule()
    layout = BlockLayout((1, 1))
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])

    def test_all_observed_returns_inputs_exactly(self):
        obs = np.arange(6, dtype=np.float64).reshape(3, 2)
        out = pc_sample_batch(
            standard_normal_score, self.schedule, SamplerConfig(), ModalityMask((True, True)),
            self.layout, observed_latents=obs, seed=0, n=3,
        )
        np.testing.assert_array_equal(out, obs)

    def test_observed_coordinates_exact_at_t_zero(self):
        score = make_gaussian_score(self.cov, self.schedule)
        obs = np.zeros((64, 2))
        obs[:, 0] = 1.3
        out = pc_sample_batch(
            score, self.schedule, SamplerConfig(corrector_steps=1),
            ModalityMask((True, False)), self.layout, observed_latents=obs, seed=1, n=64,
        )
        np.testing.assert_array_equal(out[:, 0], obs[:, 0])

    def test_conditional_moments_match_bivariate_conditioning(self):
        """Conditioning on z_o with the analytic joint score: E[z_u|z_o] near
        0.8 z_o and Var[z_u|z_o] near 1 - 0.8^2 = 0.36, both within 0.1."""
        score = make_gaussian_score(self.cov, self.schedule)
        cfg = SamplerConfig(corrector_steps=3, snr=0.3)
        for g in (-1.5, 0.0, 1.5):
            obs = np.zeros((5000, 2))
            obs[:, 0] = g
            out = pc_sample_batch(
                score, self.schedule, cfg, ModalityMask((True, False)), self.layout,
                observed_latents=obs, seed=int(10 * g) + 17, n=5000,
            )
            z_u = out[:, 1]
            assert abs(z_u.mean() - 0.8 * g) < 0.1
            assert abs(z_u.var() - 0.36) < 0.1

    def test_unconditional_covariance_matches_generator(self):
        """Unconditional draws from the analytic score recover the data
        covariance entrywise within 0.1."""
        score = make_gaussian_score(self.cov, self.schedule)
        out = pc_sample_batch(
            score, self.schedule, SamplerConfig(corrector_steps=1),
            ModalityMask((False, False)), self.layout, seed=2, n=20_000,
        )
        emp = np.cov(out.T)
        assert np.abs(emp - self.cov).max() < 0.1

    def test_mask_latent_contract(self):
        with pytest.raises(ConfigError):
            pc_sample_batch(standard_normal_score, self.schedule, SamplerConfig(),
                            ModalityMask((True, False)), self.layout, seed=0, n=2)
        with pytest.raises(ConfigError):
            pc_sample_batch(standard_normal_score, self.schedule, SamplerConfig(),
                            ModalityMask((False, False)), self.layout,
                            observed_latents=np.zeros((2, 2)), seed=0, n=2)
        with pytest.raises(DimensionError):
            pc_sample_batch(standard_normal_score, self.schedule, SamplerConfig(),
                            ModalityMask((True, False)), self.layout,
                            observed_latents=np.zeros((2, 3)), seed=0, n=2)

    def test_bitwise_deterministic_given_seed(self):
        score = make_gaussian_score(self.cov, self.schedule)
        obs = np.full((4, 2), 0.5)
        runs = [
            pc_sample_batch(score, self.schedule, SamplerConfig(corrector_steps=2),
                            ModalityMask((True, False)), self.layout,
                            observed_latents=obs, seed=33, n=4)
            for _ in range(2)
        ]
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_hold_clean_variant_runs(self):
        score = make_gaussian_score(self.cov, self.schedule)
        obs = np.full((256, 2), 1.0)
        out = pc_sample_batch(
            score, self.schedule, SamplerConfig(corrector_steps=2, snr=0.3, hold_clean=True),
            ModalityMask((True, False)), self.layout, observed_latents=obs, seed=4, n=256,
        )
        np.testing.assert_array_equal(out[:, 0], obs[:, 0])
        assert abs(out[:, 1].mean() - 0.8) < 0.15

    def test_single_chain_wrapper_returns_block(self):
        score = make_gaussian_score(self.cov, self.schedule)
        block = pc_sample(score, self.schedule, SamplerConfig(), ModalityMask((False, False)),
                          self.layout, seed=5)
        assert block.t == 0.0
        assert block.values.shape == (2,)


class TestGuidance:
    layout = BlockLayout((2, 2))
    mask = ModalityMask((True, False))

    def _energy(self, seed=0) -> EnergyNetwork:
        return EnergyNetwork.create(2, 2, [8], seed=seed)

    def test_zero_scale_is_bitwise_identity(self, rng):
        score_val = rng.standard_normal((3, 4))
        out = apply_guidance(score_val, "energy", 0.0, self._energy(), rng.standard_normal((3, 4)),
                             0.5, self.mask, self.layout, rng)
        assert out is score_val

    def test_none_and_contrastive_modes_do_not_touch_the_score(self, rng):
        score_val = rng.standard_normal((3, 4))
        assert apply_guidance(score_val, "none", 5.0, None, np.zeros((3, 4)), 0.5,
                              self.mask, self.layout, rng) is score_val
        assert apply_guidance(score_val, "contrastive", 5.0, None, np.zeros((3, 4)), 0.5,
                              self.mask, self.layout, rng) is score_val

    def test_flat_energy_leaves_score_unchanged(self, rng):
        """A constant energy surface has zero gradient, so any guidance scale
        is a no-op."""
        energy = self._energy()
        for net in energy.all_nets().values():
            net.params[:] = 0.0  # all-zero weights: E identically softplus-of-0 composition
        score_val = rng.standard_normal((3, 4))
        out = apply_guidance(score_val, "energy", 1000.0, energy, rng.standard_normal((3, 4)),
                             0.5, self.mask, self.layout, rng)
        np.testing.assert_array_equal(out, score_val)

    def test_guidance_edits_only_unobserved_slices(self, rng):
        """Locality contract: observed modalities' score coordinates are never
        modified by energy guidance."""
        energy = self._energy(3)
        score_val = rng.standard_normal((5, 4))
        z = rng.standard_normal((5, 4))
        out = apply_guidance(score_val, "energy", 10.0, energy, z, 0.5,
                             self.mask, self.layout, rng)
        np.testing.assert_array_equal(out[:, self.layout.slice_of(0)],
                                      score_val[:, self.layout.slice_of(0)])
        assert not np.array_equal(out[:, self.layout.slice_of(1)],
                                  score_val[:, self.layout.slice_of(1)])

    def test_energy_mode_needs_both_sets(self, rng):
        with pytest.raises(ConfigError):
            apply_guidance(np.zeros((1, 4)), "energy", 1.0, self._energy(),
                           np.zeros((1, 4)), 0.5, ModalityMask((True, True)),
                           self.layout, rng)

    def test_pc_sample_guidance_requires_energy_net(self):
        cfg = SamplerConfig(guidance_mode="energy", guidance_scale=10.0)
        with pytest.raises(ConfigError):
            pc_sample_batch(standard_normal_score, VPSDESchedule(), cfg,
                            ModalityMask((True, False)), BlockLayout((2, 2)),
                            observed_latents=np.zeros((2, 4)), seed=0, n=2)
