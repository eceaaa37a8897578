"""Perturbation-kernel closed forms against sampling oracles, block layout."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modalsde.errors import ConfigError, DimensionError
from modalsde.rng import child_rng
from modalsde.sde import BlockLayout, LatentBlock, VPSDESchedule, marginal_params, perturb


class TestSchedule:
    def test_beta_linear_interpolation(self):
        sch = VPSDESchedule(0.1, 5.0, 100)
        assert sch.beta(0.0) == pytest.approx(0.1)
        assert sch.beta(1.0) == pytest.approx(5.0)
        assert sch.beta(0.5) == pytest.approx(2.55)

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ConfigError):
            VPSDESchedule(beta_min=0.0)
        with pytest.raises(ConfigError):
            VPSDESchedule(beta_min=2.0, beta_max=1.0)
        with pytest.raises(ConfigError):
            VPSDESchedule(n_steps=0)

    def test_grid_covers_zero_to_one(self):
        grid = VPSDESchedule(n_steps=4).grid_times()
        np.testing.assert_allclose(grid, [0.0, 0.25, 0.5, 0.75, 1.0])


class TestMarginalParams:
    def test_no_diffusion_at_t_zero(self):
        alpha, sigma = marginal_params(VPSDESchedule(), 0.0)
        assert alpha == 1.0 and sigma == 0.0

    def test_terminal_values_from_linear_beta_integral(self):
        """beta_min=0.1, beta_max=5: integral over [0,1] is 0.1 + 4.9/2 = 2.55,
        so alpha(1) = exp(-1.275) ~ 0.2794 and sigma(1) ~ 0.9602."""
        alpha, sigma = marginal_params(VPSDESchedule(0.1, 5.0, 100), 1.0)
        assert alpha == pytest.approx(np.exp(-1.275), rel=1e-12)
        assert alpha == pytest.approx(0.2794, abs=5e-5)
        assert sigma == pytest.approx(0.9602, abs=5e-5)

    def test_out_of_range_time_rejected(self):
        with pytest.raises(ConfigError):
            marginal_params(VPSDESchedule(), 1.5)
        with pytest.raises(ConfigError):
            marginal_params(VPSDESchedule(), -0.1)

    def test_monte_carlo_oracle_at_half_time(self):
        """10^5 perturbations of a unit mass: empirical mean and std match the
        closed form within 3 Monte-Carlo standard errors."""
        sch = VPSDESchedule()
        rng = child_rng(0, "mc-kernel")
        n = 100_000
        alpha, sigma = marginal_params(sch, 0.5)
        z_t, _ = perturb(sch, np.ones((n, 1)), 0.5, rng)
        se_mean = sigma / np.sqrt(n)
        se_std = sigma / np.sqrt(2 * n)
        assert abs(z_t.mean() - alpha) < 3 * se_mean
        assert abs(z_t.std(ddof=1) - sigma) < 3 * se_std

    @given(st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=200, deadline=None)
    def test_alpha_sigma_consistent(self, t):
        alpha, sigma = marginal_params(VPSDESchedule(), t)
        assert 0.0 < alpha <= 1.0
        assert alpha**2 + sigma**2 == pytest.approx(1.0, abs=1e-12)


class TestPerturb:
    def test_score_target_identity(self):
        """sigma^2 ||target||^2 equals ||eps||^2: the target is -eps/sigma."""
        sch = VPSDESchedule()
        rng = child_rng(1, "perturb")
        z0 = rng.standard_normal((64, 3))
        z_t, target = perturb(sch, z0, 0.37, rng)
        alpha, sigma = marginal_params(sch, 0.37)
        eps = (z_t - alpha * z0) / sigma
        np.testing.assert_allclose(sigma**2 * np.sum(target**2), np.sum(eps**2), rtol=1e-10)
        np.testing.assert_allclose(target, -eps / sigma, rtol=1e-10)

    def test_degenerate_time_rejected(self):
        with pytest.raises(ConfigError):
            perturb(VPSDESchedule(), np.ones(2), 0.0, child_rng(0, "x"))

    def test_variance_preservation(self):
        """Unit-variance data keeps E||z_t||^2 = D at every time."""
        sch = VPSDESchedule()
        rng = child_rng(2, "vp")
        d, n = 4, 50_000
        z0 = rng.standard_normal((n, d))
        for t in (0.25, 0.5, 0.75, 1.0):
            z_t, _ = perturb(sch, z0, t, rng)
            mean_sq = float(np.mean(np.sum(z_t**2, axis=1)))
            assert mean_sq == pytest.approx(d, rel=0.02)

    def test_terminal_distribution_near_standard_normal(self):
        """At t=1 the marginal of standard-normal data is within 0.03 total
        variation of N(0, I) (histogram estimate)."""
        sch = VPSDESchedule()
        rng = child_rng(3, "terminal")
        n = 100_000
        z0 = rng.standard_normal((n, 1))
        z_t, _ = perturb(sch, z0, 1.0, rng)
        edges = np.linspace(-4, 4, 41)
        emp, _ = np.histogram(z_t[:, 0], bins=edges)
        emp = emp / n
        from math import erf

        cdf = np.array([0.5 * (1 + erf(e / np.sqrt(2))) for e in edges])
        ref = np.diff(cdf)
        # mass outside the histogram window is negligible at these scales
        tv = 0.5 * np.sum(np.abs(emp - ref))
        assert tv < 0.03

    def test_per_row_times(self):
        sch = VPSDESchedule()
        rng = child_rng(4, "rows")
        z0 = np.zeros((3, 2))
        t = np.array([0.2, 0.5, 0.9])
        z_t, target = perturb(sch, z0, t, rng)
        assert z_t.shape == (3, 2) and target.shape == (3, 2)


class TestBlockLayout:
    def test_slices_tile_the_vector(self):
        layout = BlockLayout((2, 3, 1))
        assert layout.total_dim == 6
        assert layout.offsets == (0, 2, 5)
        covered = np.zeros(6, dtype=int)
        for k in range(3):
            covered[layout.slice_of(k)] += 1
        np.testing.assert_array_equal(covered, np.ones(6, dtype=int))

    def test_coordinate_mask_expansion(self):
        layout = BlockLayout((2, 2))
        mask = layout.coordinate_mask([True, False])
        np.testing.assert_array_equal(mask, [True, True, False, False])
        with pytest.raises(DimensionError):
            layout.coordinate_mask([True])

    def test_stack_split_roundtrip(self, rng):
        layout = BlockLayout((3, 2, 4))
        parts = [rng.standard_normal((5, d)) for d in layout.dims]
        stacked = layout.stack(parts)
        for part, back in zip(parts, layout.split(stacked)):
            np.testing.assert_array_equal(part, back)

    def test_latent_block_validation(self):
        layout = BlockLayout((2, 2))
        LatentBlock(np.zeros(4), layout, 0.5)
        with pytest.raises(DimensionError):
            LatentBlock(np.zeros(3), layout)
        with pytest.raises(ConfigError):
            LatentBlock(np.zeros(4), layout, t=1.5)

    @given(st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=5))
    @settings(max_examples=50, deadline=None)
    def test_tiling_property(self, dims):
        layout = BlockLayout(tuple(dims))
        seen = []
        for k in range(layout.n_modalities):
            sl = layout.slice_of(k)
            seen.extend(range(sl.start, sl.stop))
        assert seen == list(range(layout.total_dim))
