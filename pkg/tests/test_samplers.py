import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowlab import VE, VP, AtomCloud, ExactField, InputError, SingularMapError, UnsupportedSchemeError, ZeroField
from flowlab.forward import MarginalLaw, build_grid, grid_with_steps
from flowlab.samplers import (
    coefficients,
    continuous_reference,
    ddim_coefficient,
    interpolant,
    interpolant_jacobian,
    interpolant_time_derivative,
    interpolant_time_derivative_jacobian,
    invert_interpolant,
    run_reverse,
    scheme_name,
    start_law,
    step,
    step_logdet,
)
from flowlab.scores import PerturbedField

from strategies import clouds

COMBOS = [("VP", "euler"), ("VP", "ei"), ("VP", "ddim"), ("VE", "euler"), ("VE", "ddim")]
SPECS = {"VP": VP, "VE": VE}


class TestCoefficients:
    def test_aliases(self):
        assert scheme_name("Exponential-Integrator") == "ei"
        with pytest.raises(InputError):
            scheme_name("heun")

    def test_ddim_coefficient(self):
        assert ddim_coefficient(1.0) == 1.0
        assert ddim_coefficient(4.0) == pytest.approx(4.0 * (1 - math.sqrt(0.75)))
        assert 0.5 < ddim_coefficient(1e12) < 0.5 + 1e-12
        with pytest.raises(InputError):
            ddim_coefficient(0.5)

    @given(st.floats(1.0, 1e6))
    def test_ddim_coefficient_range(self, l):
        assert 0.5 <= ddim_coefficient(l) <= 1.0

    def test_ei_needs_vp(self):
        with pytest.raises(UnsupportedSchemeError):
            coefficients("ei", VE, 5.0, 0.0, 0.1, 0.05)

    def test_time_outside_step(self):
        with pytest.raises(InputError):
            coefficients("euler", VP, 5.0, 0.0, 0.1, 0.2)

    def test_step_is_interpolant_at_end(self, two_atoms):
        field = ExactField(two_atoms, VP)
        x = np.array([[0.3], [-1.2]])
        a = step("ei", VP, field, 3.0, 0.5, 0.7, x)
        b = interpolant("ei", VP, field, 3.0, 0.5, 0.7, 0.7, x)
        assert np.array_equal(a, b)

    def test_interpolant_starts_at_identity(self, two_atoms):
        field = ExactField(two_atoms, VE)
        x = np.array([[0.3]])
        for scheme in ("euler", "ddim"):
            assert np.array_equal(interpolant(scheme, VE, field, 3.0, 0.5, 0.7, 0.5, x), x)


@pytest.mark.parametrize("kind,scheme", COMBOS)
def test_time_derivative_matches_difference(kind, scheme, skewed_cloud):
    fs = SPECS[kind]
    field = PerturbedField(ExactField(skewed_cloud, fs), 0.1, 3)
    z = np.array([[0.4], [-1.0]])
    t, h = 0.83, 1e-5
    fd = (interpolant(scheme, fs, field, 4.0, 0.8, 0.9, t + h, z) - interpolant(scheme, fs, field, 4.0, 0.8, 0.9, t - h, z)) / (2 * h)
    assert np.allclose(interpolant_time_derivative(scheme, fs, field, 4.0, 0.8, 0.9, t, z), fd, rtol=1e-7)


@pytest.mark.parametrize("kind,scheme", COMBOS)
def test_jacobians_match_differences(kind, scheme, planar_cloud):
    fs = SPECS[kind]
    field = ExactField(planar_cloud, fs)
    z = np.array([[0.4, 0.1]])
    h = 1e-6
    J = interpolant_jacobian(scheme, fs, field, 4.0, 0.8, 0.9, 0.85, z)
    dJ = interpolant_time_derivative_jacobian(scheme, fs, field, 4.0, 0.8, 0.9, 0.85, z)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        col = (interpolant(scheme, fs, field, 4.0, 0.8, 0.9, 0.85, z + e) - interpolant(scheme, fs, field, 4.0, 0.8, 0.9, 0.85, z - e)) / (2 * h)
        dcol = (interpolant_time_derivative(scheme, fs, field, 4.0, 0.8, 0.9, 0.85, z + e)
                - interpolant_time_derivative(scheme, fs, field, 4.0, 0.8, 0.9, 0.85, z - e)) / (2 * h)
        assert np.allclose(J[0, :, j], col[0], rtol=1e-6, atol=1e-8)
        assert np.allclose(dJ[0, :, j], dcol[0], rtol=1e-6, atol=1e-8)


class TestInversion:
    @given(clouds(max_atoms=3), st.sampled_from(COMBOS), st.integers(0, 40), st.floats(0.0, 1.0))
    def test_round_trip(self, cloud, combo, k, u):
        fs = SPECS[combo[0]]
        grid = build_grid(4.0, 0.05, 0.1)
        k = min(k, grid.N - 1)
        t_k, t_next = grid.nodes[k], grid.nodes[k + 1]
        t = t_k + u * (t_next - t_k)
        field = ExactField(cloud, fs)
        ms = fs.scaling(grid.T - t_k)
        z = ms.f * np.repeat(cloud.atoms, 3, axis=0) + ms.g * np.linspace(-2, 2, 3 * cloud.size)[:, None]
        x = interpolant(combo[1], fs, field, grid.T, t_k, t_next, t, z)
        back = invert_interpolant(combo[1], fs, field, grid.T, t_k, t_next, t, x)
        assert np.max(np.abs(back - z) / np.maximum(1.0, np.abs(z))) <= 1e-10

    def test_logdet_of_linear_map(self):
        field = ZeroField(2)
        co = coefficients("euler", VP, 3.0, 0.0, 0.2, 0.2)
        ld = step_logdet("euler", VP, field, 3.0, 0.0, 0.2, 0.2, np.zeros((1, 2)))
        assert ld[0] == pytest.approx(2 * math.log(co.alpha))

    def test_missing_preimage_is_reported(self):
        # a DDIM step that reaches tau = 0 maps every point to the posterior mean,
        # which lies inside the atom hull; 3.0 has no preimage
        cloud = AtomCloud(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
        field = ExactField(cloud, VE)
        x = np.array([[0.0], [3.0]])
        with pytest.raises(SingularMapError) as info:
            invert_interpolant("ddim", VE, field, 2.0, 1.0, 2.0, 2.0, x)
        assert info.value.location is not None


class TestRuns:
    def test_linear_gaussian_flow(self):
        # single atom at the origin: every EI step is linear, so the law stays Gaussian
        cloud = AtomCloud.single([0.0])
        grid = build_grid(3.0, 0.1, 0.2)
        run = run_reverse("ei", VP, ExactField(cloud, VP), grid, {"count": 5}, seed=1)
        scale = 1.0
        for k in range(grid.N):
            g2 = VP.scaling(grid.T - grid.nodes[k]).g ** 2
            dt = grid.nodes[k + 1] - grid.nodes[k]
            scale *= math.exp(dt) - math.expm1(dt) / g2
        assert np.allclose(run.states[:, -1], scale * run.states[:, 0], rtol=1e-12)
        assert np.allclose(run.logdet[:, -1], math.log(scale), rtol=1e-12)

    def test_worker_count_does_not_change_results(self, two_atoms):
        grid = build_grid(3.0, 0.1, 0.2)
        field = ExactField(two_atoms, VP)
        a = run_reverse("ei", VP, field, grid, {"count": 9}, seed=4, jobs=1)
        b = run_reverse("ei", VP, field, grid, {"count": 9}, seed=4, jobs=3)
        assert np.array_equal(a.states, b.states) and np.array_equal(a.logdet, b.logdet)

    def test_init_spec_checks_keys(self, two_atoms):
        grid = build_grid(3.0, 0.1, 0.5)
        with pytest.raises(InputError):
            run_reverse("ei", VP, ExactField(two_atoms, VP), grid, {"n": 3}, seed=1)

    def test_csv_rows(self, two_atoms):
        grid = build_grid(3.0, 0.1, 0.5)
        run = run_reverse("euler", VP, ExactField(two_atoms, VP), grid, np.zeros((1, 1)))
        rows = run.to_csv_rows(0)
        assert rows[0] == ["node", "t", "x0", "logdet"] and len(rows) == grid.N + 2

    def test_start_laws(self, two_atoms):
        assert start_law("prior", VE, 4.0, two_atoms).variance == 4.0
        assert isinstance(start_law("marginal", VE, 4.0, two_atoms), MarginalLaw)
        with pytest.raises(InputError):
            start_law("uniform", VE, 4.0, two_atoms)


class TestContinuousReference:
    def test_exact_flow_of_a_gaussian(self):
        # q_tau = N(0, g^2): the exact reverse flow rescales by g(tau)/g(T)
        cloud = AtomCloud.single([0.0])
        x = np.array([[0.5], [-2.0]])
        y = continuous_reference(VP, ExactField(cloud, VP), 3.0, 0.0, 2.5, x, tol=1e-11)
        ratio = VP.scaling(0.5).g / VP.scaling(3.0).g
        assert np.allclose(y, ratio * x, rtol=1e-8)

    def test_logdet_matches_map_derivative(self, two_atoms):
        field = ExactField(two_atoms, VE)
        x = np.array([[0.3]])
        y, ld = continuous_reference(VE, field, 4.0, 0.0, 3.5, x, tol=1e-11, with_logdet=True)
        h = 1e-5
        yp = continuous_reference(VE, field, 4.0, 0.0, 3.5, x + h, tol=1e-11)
        ym = continuous_reference(VE, field, 4.0, 0.0, 3.5, x - h, tol=1e-11)
        assert ld[0] == pytest.approx(math.log((yp - ym)[0, 0] / (2 * h)), abs=1e-5)

    def test_discrete_runs_approach_the_flow(self, two_atoms):
        field = ExactField(two_atoms, VP)
        x = np.linspace(-2, 2, 5)[:, None]
        ref = continuous_reference(VP, field, 3.0, 0.0, 2.9, x, tol=1e-11)
        errs = []
        for n in (50, 100, 200):
            grid = grid_with_steps(3.0, 0.1, n)
            errs.append(np.max(np.abs(run_reverse("ei", VP, field, grid, x).states[:, -1] - ref)))
        assert errs[0] > errs[1] > errs[2]
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.2)

    def test_tolerance_must_be_positive(self, two_atoms):
        with pytest.raises(InputError):
            continuous_reference(VP, ExactField(two_atoms, VP), 3.0, 0.0, 1.0, np.zeros((1, 1)), tol=0)
