import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowlab import VE, VP, AtomCloud, ExactField, PerturbedField, ZeroField
from flowlab.analytic import score
from flowlab.forward import build_grid
from flowlab.operators import (
    certify_score_bounds,
    certify_time_derivative_bounds,
    divergence_error_closed_form,
    divergence_error_operator,
    estimation_error_closed_form,
    estimation_error_operator,
    gaussian_ratio_certificate,
    make_certificate,
    moment_certificates,
    pinsker_certificate,
    probe_points,
    continuous_flow_certificate,
    theorem3_terms,
    time_derivative_bounds,
    tweedie_certificate,
)
from flowlab.samplers import ddim_coefficient

from strategies import clouds

PAIRS = [("ei", VP), ("ddim", VE)]


class TestOperators:
    @given(clouds(max_atoms=3), st.floats(0.1, 0.6), st.floats(0.0, 1.0), st.sampled_from(PAIRS),
           st.floats(0.0, 0.3), st.integers(1, 3))
    def test_closed_forms(self, cloud, t_k, frac, pair, amp, k):
        scheme, fs = pair
        T, t_next = 2.0, t_k + 0.5
        t = t_k + frac * 0.5
        field = PerturbedField(ExactField(cloud, fs), amp, k)
        z = np.random.default_rng(0).normal(size=(5, cloud.dim))
        phi = estimation_error_operator(scheme, fs, field, cloud, T, t_k, t_next, t, z)
        psi = divergence_error_operator(scheme, fs, field, cloud, T, t_k, t_next, t, z)
        assert np.allclose(phi, estimation_error_closed_form(scheme, fs, field, cloud, T, t_k, t_next, z),
                           atol=1e-10, rtol=1e-10)
        assert np.allclose(psi, divergence_error_closed_form(scheme, fs, field, cloud, T, t_k, t_next, z),
                           atol=1e-10, rtol=1e-10)

    def test_exact_vp_ei_vanishes(self, two_atoms):
        field = ExactField(two_atoms, VP)
        z = np.linspace(-3, 3, 11)[:, None]
        for t in (0.5, 0.6, 0.7):
            assert np.max(np.abs(estimation_error_operator("ei", VP, field, two_atoms, 2.0, 0.5, 0.7, t, z))) <= 1e-12
            assert np.max(np.abs(divergence_error_operator("ei", VP, field, two_atoms, 2.0, 0.5, 0.7, t, z))) <= 1e-12

    def test_exact_ve_ddim_leaves_a_multiple_of_the_score(self, two_atoms):
        # with the exact score the DDIM operator is (c_l - 1/2) s, not zero
        field = ExactField(two_atoms, VE)
        z = np.linspace(-3, 3, 11)[:, None]
        c = ddim_coefficient((2.0 - 0.5) / 0.2)
        phi = estimation_error_operator("ddim", VE, field, two_atoms, 2.0, 0.5, 0.7, 0.6, z)
        assert np.allclose(phi, (c - 0.5) * score(two_atoms, VE.scaling(1.5), z), atol=1e-12)
        assert c > 0.5

    def test_no_closed_form_for_other_pairs(self, two_atoms):
        with pytest.raises(Exception):
            estimation_error_closed_form("euler", VP, ZeroField(1), two_atoms, 2.0, 0.5, 0.7, np.zeros((1, 1)))


class TestCertificateLogic:
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.floats(0.1, 10), st.booleans())
    def test_pass_iff_ratio_within_limit(self, measured, bound, exact):
        cert = make_certificate("x", {}, measured, bound, exact, cap=5.0)
        limit = 1 + 1e-9 if exact else 5.0
        assert cert.passed == (cert.max_ratio <= limit)
        assert cert.max_ratio == pytest.approx(max(measured) / bound)

    def test_degenerate_ratios(self):
        assert make_certificate("x", {}, [0.0], [0.0], True).max_ratio == 0.0
        assert not make_certificate("x", {}, [1.0], [0.0], True).passed
        nan = make_certificate("x", {}, [float("nan")], [1.0], False)
        assert math.isnan(nan.max_ratio) and not nan.passed

    def test_row_layout(self):
        row = make_certificate("x", {"b": 1, "a": 2}, [1.0], [2.0], True).as_row()
        assert list(row) == ["bound_name", "param_a", "param_b", "probes", "max_ratio", "pass",
                             "exact_constant", "cap"]


class TestScoreBounds:
    def test_single_atom_is_within_bounds(self):
        cloud = AtomCloud.single([0.8])
        for fs in (VP, VE):
            taus = [0.05, 0.5, 2.0]
            pts = probe_points(cloud, fs, taus, 200, seed=1)
            for cert in certify_score_bounds(cloud, fs, taus, pts):
                assert cert.passed and cert.max_ratio <= 1.0

    @given(clouds(max_atoms=3))
    def test_random_clouds(self, cloud):
        taus = [0.1, 1.0]
        pts = probe_points(cloud, VP, taus, 40, seed=2)
        assert all(c.passed for c in certify_score_bounds(cloud, VP, taus, pts))

    def test_time_derivative_bounds_are_positive_and_pass(self, two_atoms):
        x = np.linspace(-3, 3, 7)[:, None]
        for fs in (VP, VE):
            b_score, b_trace = time_derivative_bounds(fs, 1.0, 1, 0.3, x)
            assert np.all(b_score > 0) and np.all(b_trace > 0)
            certs = certify_time_derivative_bounds(two_atoms, fs, [0.05, 0.3, 1.0], x)
            assert all(c.passed for c in certs)


class TestGaussianRatio:
    def test_single_atom_attains_bound_at_the_atom(self):
        cert = gaussian_ratio_certificate(AtomCloud.single([0.0]), 1.0, 1.0, np.array([[0.0]]))
        assert cert.max_ratio == pytest.approx(1.0, abs=1e-12)

    def test_h_zero_is_ratio_one(self, planar_cloud):
        pts = np.random.default_rng(3).normal(size=(50, 2))
        assert gaussian_ratio_certificate(planar_cloud, 0.3, 0.0, pts).max_ratio == pytest.approx(1.0)

    def test_density_ratio_is_sqrt_two_at_the_atom(self):
        from flowlab.analytic import MarginalScaling, log_marginal_density

        cloud, x = AtomCloud.single([0.0]), np.array([[0.0]])
        lp = log_marginal_density(cloud, MarginalScaling(1.0, math.sqrt(0.5)), x)
        lq = log_marginal_density(cloud, MarginalScaling(1.0, 1.0), x)
        assert math.exp(lp[0] - lq[0]) == pytest.approx(math.sqrt(2.0))
        assert gaussian_ratio_certificate(cloud, 0.5, 0.5, x).max_ratio == pytest.approx(1.0)

    def test_rejects_bad_arguments(self, two_atoms):
        with pytest.raises(Exception):
            gaussian_ratio_certificate(two_atoms, 0.0, 1.0, np.zeros((1, 1)))


class TestMoments:
    def test_closed_forms_agree_with_sampling(self, planar_cloud):
        from flowlab.forward import sample_marginal
        from flowlab.operators import _moment_exact

        for fs in (VP, VE):
            y = sample_marginal(planar_cloud, fs, 0.7, 400_000, 11)
            r = np.linalg.norm(y, axis=-1)
            for order in (2, 4):
                mc = r**order
                se = mc.std() / math.sqrt(len(mc))
                assert abs(mc.mean() - _moment_exact(planar_cloud, fs, 0.7, order)) <= 4 * se

    def test_order_only_ratios_stay_under_cap(self, two_atoms):
        certs = moment_certificates(two_atoms, VP, [0.05, 0.5, 2.0], samples=20_000, seed=1)
        assert all(c.passed for c in certs)

    def test_small_radius_vp_fourth_moment_is_loose(self):
        # the bound scales with R^4 while the noise term does not: ratios beyond 10 appear
        cloud = AtomCloud.single([0.05])
        cert = moment_certificates(cloud, VP, [0.02], orders=(4,), seed=0, cap=100.0)[0]
        assert cert.max_ratio > 10

    def test_tweedie(self, two_atoms):
        for fs in (VP, VE):
            assert tweedie_certificate(two_atoms, fs, [0.1, 1.0], 20_000, 5).passed

    def test_pinsker(self, two_atoms):
        cert = pinsker_certificate(two_atoms, [1.0, 4.0, 16.0])
        assert cert.passed and cert.extra["max_refinement_error"] < 1e-5
        with pytest.raises(Exception):
            pinsker_certificate(AtomCloud.single([0.0, 0.0, 0.0]), [1.0])


class TestContinuousBound:
    def test_exact_field_has_only_the_prior_term(self, two_atoms):
        res = continuous_flow_certificate(two_atoms, ExactField(two_atoms, VP), 3.0, 0.1, n_x=401)
        assert res["eps_score"] == 0.0 and res["eps_div"] == 0.0
        assert res["holds"]

    def test_perturbed_field_holds(self, two_atoms):
        field = PerturbedField(ExactField(two_atoms, VP), 0.05, 2)
        res = continuous_flow_certificate(two_atoms, field, 3.0, 0.1, n_x=401)
        assert res["holds"] and 0 < res["ratio"] < 1


class TestFiveTerms:
    def test_exact_vp_ei_kills_the_estimation_terms(self):
        cloud = AtomCloud(np.array([[-0.5], [0.5]]), np.array([0.5, 0.5]))
        grid = build_grid(2.0, 0.2, 0.3)
        res = theorem3_terms("ei", VP, ExactField(cloud, VP), cloud, grid, n_x=801)
        assert res["totals"]["I"] <= 1e-8 and res["totals"]["II"] <= 1e-8
        assert res["holds"] and res["slack"] >= 0

    def test_perturbed_ve_ddim_holds(self):
        cloud = AtomCloud(np.array([[-0.5], [0.5]]), np.array([0.5, 0.5]))
        grid = build_grid(3.0, 0.2, 0.1)
        field = PerturbedField(ExactField(cloud, VE), 0.05, 2)
        res = theorem3_terms("ddim", VE, field, cloud, grid, n_x=801)
        assert res["holds"]
        assert all(v >= 0 for v in res["totals"].values())
        assert len(res["rows"]) == grid.N
