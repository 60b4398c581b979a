"""Numerical primitives: truncated normal, orthonormalization, R-hat."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ammivi.statsmath import (ChainSet, DegenerateInputError, TruncNormalParams,
                              gelman_rubin, orthonormalize_interaction,
                              sample_trunc_normal, trunc_normal_moments)


def quad_moments(location, scale_sq):
    """Adaptive-quadrature oracle for the positive-truncated normal.

    Works in standardized units u = (x - lower)/s - alpha shifted so the
    integrand is O(1) for any truncation point, avoiding underflow.
    """
    s = np.sqrt(scale_sq)
    alpha = -location / s
    # X = location + s*(alpha + U) with U >= 0, density prop. to
    # exp(-alpha*u - u^2/2) * exp(peak) where the constant cancels in ratios
    peak = 0.5 * alpha * alpha if alpha < 0 else 0.0

    def w(u):
        return np.exp(-alpha * u - 0.5 * u * u - peak)

    kw = dict(limit=400)
    n0 = quad(w, 0.0, np.inf, **kw)[0]
    n1 = quad(lambda u: u * w(u), 0.0, np.inf, **kw)[0]
    n2 = quad(lambda u: u * u * w(u), 0.0, np.inf, **kw)[0]
    t_mean = alpha + n1 / n0
    t_var = n2 / n0 - (n1 / n0) ** 2
    return location + s * t_mean, scale_sq * t_var


class TestTruncNormalMoments:
    def test_half_normal_closed_form(self):
        mean, var = trunc_normal_moments(TruncNormalParams(0.0, 1.0))
        assert mean == pytest.approx(np.sqrt(2.0 / np.pi), abs=1e-12)
        assert var == pytest.approx(1.0 - 2.0 / np.pi, abs=1e-12)

    def test_negligible_truncation(self):
        mean, var = trunc_normal_moments(TruncNormalParams(10.0, 1.0))
        assert mean == pytest.approx(10.0, abs=1e-9)
        assert var == pytest.approx(1.0, abs=1e-9)

    def test_deep_left_tail_vs_quadrature(self):
        mean, var = trunc_normal_moments(TruncNormalParams(-5.0, 1.0))
        om, ov = quad_moments(-5.0, 1.0)
        assert mean == pytest.approx(om, abs=1e-8)
        assert var == pytest.approx(ov, abs=1e-8)

    def test_location_grid_vs_quadrature(self):
        for location in np.linspace(-8.0, 8.0, 33):
            for scale_sq in (0.25, 1.0, 4.0):
                mean, var = trunc_normal_moments(
                    TruncNormalParams(float(location), scale_sq))
                om, ov = quad_moments(float(location), scale_sq)
                assert abs(mean - om) < 1e-8, (location, scale_sq)
                assert abs(var - ov) < 1e-8, (location, scale_sq)

    def test_both_branches_accurate_near_switch(self):
        # just below and above the tail-series switch, each branch must
        # agree with the quadrature oracle
        for location in (-24.9, -25.1, -30.0):
            mean, var = trunc_normal_moments(TruncNormalParams(location, 1.0))
            om, ov = quad_moments(location, 1.0)
            assert mean == pytest.approx(om, rel=1e-6)
            assert var == pytest.approx(ov, rel=1e-5)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            TruncNormalParams(0.0, 0.0)
        with pytest.raises(ValueError):
            TruncNormalParams(np.nan, 1.0)

    @given(location=st.floats(-30.0, 30.0), scale_sq=st.floats(0.01, 100.0))
    @settings(max_examples=200, deadline=None)
    def test_mean_above_location_and_variance_reduced(self, location, scale_sq):
        mean, var = trunc_normal_moments(TruncNormalParams(location, scale_sq))
        assert np.isfinite(mean) and np.isfinite(var)
        # strict inequalities hold mathematically; allow float rounding to
        # equality when the truncated mass is negligible
        assert mean >= location
        assert 0 < var <= scale_sq


class TestSampleTruncNormal:
    def test_support(self, rng):
        draws = sample_trunc_normal(rng, TruncNormalParams(0.0, 1.0), size=1000)
        assert np.all(draws > 0)
        assert sample_trunc_normal(rng, TruncNormalParams(-3.0, 4.0)) > 0

    def test_half_normal_mean(self, rng):
        n = 10 ** 6
        draws = sample_trunc_normal(rng, TruncNormalParams(0.0, 1.0), size=n)
        mean, var = trunc_normal_moments(TruncNormalParams(0.0, 1.0))
        se = np.sqrt(var / n)
        assert abs(draws.mean() - mean) < 3 * se

    def test_deep_tail_matches_quadrature(self, rng):
        n = 10 ** 5
        p = TruncNormalParams(-8.0, 1.0)
        draws = sample_trunc_normal(rng, p, size=n)
        om, ov = quad_moments(-8.0, 1.0)
        assert abs(draws.mean() - om) < 3 * np.sqrt(ov / n)

    def test_moment_match_various_params(self, rng):
        n = 200_000
        for loc, v in [(-2.0, 0.5), (1.5, 2.0), (-0.3, 1.0)]:
            p = TruncNormalParams(loc, v)
            draws = sample_trunc_normal(rng, p, size=n)
            mean, var = trunc_normal_moments(p)
            assert abs(draws.mean() - mean) < 3 * np.sqrt(var / n)


class TestOrthonormalizeInteraction:
    def test_hand_example(self):
        gamma, delta = orthonormalize_interaction(
            np.array([[1.0], [2.0], [3.0]]), np.array([[1.0], [0.0], [-1.0], [0.0]]))
        expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0)
        # first entry is negative after centering, so the column is flipped
        assert np.allclose(gamma[:, 0], -expected, atol=1e-12)

    def test_postconditions(self, rng):
        gamma, delta = orthonormalize_interaction(
            rng.standard_normal((25, 2)), rng.standard_normal((12, 2)))
        for mat in (gamma, delta):
            assert np.max(np.abs(mat.sum(axis=0))) < 1e-10
            assert np.max(np.abs(mat.T @ mat - np.eye(2))) < 1e-10
        assert np.all(gamma[0] > 0)

    def test_idempotent(self, rng):
        gamma, delta = orthonormalize_interaction(
            rng.standard_normal((10, 2)), rng.standard_normal((8, 2)))
        gamma2, delta2 = orthonormalize_interaction(gamma, delta)
        assert np.max(np.abs(gamma2 - gamma)) < 1e-12
        assert np.max(np.abs(delta2 - delta)) < 1e-12

    def test_column_space_matches_qr_oracle(self, rng):
        raw = rng.standard_normal((25, 2))
        gamma, _ = orthonormalize_interaction(raw, rng.standard_normal((12, 2)))
        centered = raw - raw.mean(axis=0)
        q_oracle, _ = np.linalg.qr(centered)
        # principal angles between the two orthonormal bases
        sv = np.linalg.svd(q_oracle.T @ gamma, compute_uv=False)
        assert np.max(np.abs(sv - 1.0)) < 1e-8

    def test_rank_deficiency_error(self):
        col = np.ones((5, 1)) * 3.0  # constant column: zero after centering
        with pytest.raises(DegenerateInputError):
            orthonormalize_interaction(col, np.random.default_rng(0).standard_normal((5, 1)))

    def test_too_few_rows_error(self):
        with pytest.raises(DegenerateInputError):
            orthonormalize_interaction(np.ones((2, 2)), np.ones((5, 2)))


class TestGelmanRubin:
    def test_well_mixed_chains(self, rng):
        draws = rng.standard_normal(4000).reshape(4, 1000)
        assert gelman_rubin(ChainSet(draws)) < 1.01

    def test_separated_chains(self, rng):
        draws = np.vstack([rng.standard_normal(500),
                           rng.standard_normal(500) + 100.0])
        assert gelman_rubin(ChainSet(draws)) > 1.1

    def test_matches_scripted_formula(self, rng):
        draws = rng.normal(0.0, 1.0, (3, 40)) + np.array([[0.0], [0.5], [-0.2]])
        # independent split-R-hat evaluation
        half = 20
        seqs = [draws[c, a:a + half] for c in range(3) for a in (0, half)]
        m, n = len(seqs), half
        means = np.array([s.mean() for s in seqs])
        w = np.mean([s.var(ddof=1) for s in seqs])
        b = n * means.var(ddof=1)
        expected = np.sqrt(((n - 1) / n * w + b / n) / w)
        assert gelman_rubin(ChainSet(draws)) == pytest.approx(expected, abs=1e-12)

    @given(scale=st.floats(0.1, 50.0), shift=st.floats(-100.0, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, scale, shift):
        draws = np.random.default_rng(7).normal(0.0, 1.0, (4, 60))
        base = gelman_rubin(ChainSet(draws))
        moved = gelman_rubin(ChainSet(draws * scale + shift))
        assert moved == pytest.approx(base, rel=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            gelman_rubin(ChainSet(np.zeros((1, 100))))
        with pytest.raises(ValueError):
            gelman_rubin(ChainSet(np.ones((4, 100))))
        with pytest.raises(ValueError):
            gelman_rubin(ChainSet(np.zeros((4, 3))))
