import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowlab import VE, VP, AtomCloud, DomainError, InputError, MarginalScaling
from flowlab.analytic import (
    grad_trace_hessian,
    log_marginal_density,
    marginal_density,
    responsibilities,
    score,
    score_divergence,
    score_jacobian,
    time_derivatives,
)

from strategies import clouds, taus


def mp_density(cloud, f, g, x):
    # 50-digit reference for the smoothed cloud density
    mpmath.mp.dps = 50
    d = cloud.dim
    total = mpmath.mpf(0)
    for y, w in zip(cloud.atoms, cloud.weights):
        sq = sum((mpmath.mpf(float(xi)) - mpmath.mpf(f) * mpmath.mpf(float(yi))) ** 2 for xi, yi in zip(x, y))
        total += mpmath.mpf(float(w)) * mpmath.exp(-sq / (2 * mpmath.mpf(g) ** 2))
    return total / (2 * mpmath.pi * mpmath.mpf(g) ** 2) ** (mpmath.mpf(d) / 2)


def fd(fun, x, h):
    # five-point central difference in every coordinate, stacked on the last axis
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        cols.append((-fun(x + 2 * e) + 8 * fun(x + e) - 8 * fun(x - e) + fun(x - 2 * e)) / (12 * h))
    return np.stack(cols, axis=-1)


class TestAtomCloud:
    def test_radius_is_largest_atom_norm(self):
        c = AtomCloud(np.array([[3.0, 4.0], [0.0, 1.0]]), np.array([0.5, 0.5]))
        assert c.radius == 5.0

    def test_rejects_bad_weights(self):
        with pytest.raises(InputError):
            AtomCloud(np.array([[0.0]]), np.array([0.5]))
        with pytest.raises(InputError):
            AtomCloud(np.array([[0.0], [1.0]]), np.array([1.5, -0.5]))

    def test_rejects_unknown_keys(self):
        with pytest.raises(InputError):
            AtomCloud.from_dict({"atoms": [[0.0]], "weights": [1.0], "radius": 3})

    def test_json_round_trip(self, planar_cloud):
        back = AtomCloud.from_json(planar_cloud.to_json())
        assert np.array_equal(back.atoms, planar_cloud.atoms)
        assert json.loads(back.to_json()) == json.loads(planar_cloud.to_json())

    def test_moments(self, skewed_cloud):
        y = skewed_cloud.atoms[:, 0]
        w = skewed_cloud.weights
        assert skewed_cloud.second_moment() == pytest.approx(w @ y**2)
        assert skewed_cloud.variance() == pytest.approx(w @ y**2 - (w @ y) ** 2)

    def test_noise_scale_must_be_positive(self):
        with pytest.raises(DomainError):
            MarginalScaling(1.0, 0.0)


class TestDensity:
    @pytest.mark.parametrize("x", [-3.0, -0.2, 0.0, 1.1, 4.5])
    def test_matches_high_precision(self, skewed_cloud, x):
        ms = VP.scaling(0.3)
        ref = mp_density(skewed_cloud, ms.f, ms.g, [x])
        got = marginal_density(skewed_cloud, ms, np.array([[x]]))[0]
        assert abs(got - float(ref)) <= 1e-13 * float(ref)

    def test_far_tail_log_density_stays_finite(self, two_atoms):
        ms = VP.scaling(0.01)
        ref = mpmath.log(mp_density(two_atoms, ms.f, ms.g, [40.0]))
        got = log_marginal_density(two_atoms, ms, np.array([[40.0]]))[0]
        assert got == pytest.approx(float(ref), rel=1e-12)

    def test_planar_matches_high_precision(self, planar_cloud):
        ms = VE.scaling(0.7)
        x = [0.3, -0.4]
        ref = mp_density(planar_cloud, ms.f, ms.g, x)
        assert marginal_density(planar_cloud, ms, np.array([x]))[0] == pytest.approx(float(ref), rel=1e-13)

    def test_integrates_to_one(self, skewed_cloud):
        ms = VP.scaling(0.5)
        x = np.linspace(-10, 10, 20001)[:, None]
        assert np.trapezoid(marginal_density(skewed_cloud, ms, x), x[:, 0]) == pytest.approx(1.0, abs=1e-10)

    def test_wrong_dimension_raises(self, planar_cloud):
        with pytest.raises(InputError):
            score(planar_cloud, VP.scaling(1.0), np.zeros((3, 1)))

    @given(clouds(), taus)
    def test_responsibilities_are_a_distribution(self, cloud, tau):
        x = np.linspace(-3, 3, 7)[:, None] * np.ones(cloud.dim)
        r = responsibilities(cloud, VP.scaling(tau), x)
        assert np.all(r >= 0)
        assert np.allclose(r.sum(axis=-1), 1.0)


class TestDerivatives:
    def test_single_atom_closed_forms(self):
        c = AtomCloud.single([0.7])
        ms = VP.scaling(0.4)
        x = np.array([[1.3]])
        assert score(c, ms, x)[0, 0] == pytest.approx(-(1.3 - ms.f * 0.7) / ms.g**2)
        assert score_jacobian(c, ms, x)[0, 0, 0] == pytest.approx(-1 / ms.g**2)
        assert score_divergence(c, ms, x)[0] == pytest.approx(-1 / ms.g**2)
        assert grad_trace_hessian(c, ms, x)[0, 0] == 0.0

    @given(clouds(), taus, st.sampled_from([VP, VE]))
    def test_against_finite_differences(self, cloud, tau, fs):
        ms = fs.scaling(tau)
        rng = np.random.default_rng(0)
        x = ms.f * cloud.atoms[rng.integers(cloud.size, size=5)] + 1.5 * ms.g * rng.standard_normal((5, cloud.dim))
        h = 1e-3 * ms.g
        pairs = [
            (score(cloud, ms, x) * ms.g, fd(lambda y: log_marginal_density(cloud, ms, y), x, h) * ms.g),
            (score_jacobian(cloud, ms, x) * ms.g**2, fd(lambda y: score(cloud, ms, y), x, h) * ms.g**2),
            (score_divergence(cloud, ms, x) * ms.g**2,
             np.trace(fd(lambda y: score(cloud, ms, y), x, h), axis1=-2, axis2=-1) * ms.g**2),
            (grad_trace_hessian(cloud, ms, x) * ms.g**3, fd(lambda y: score_divergence(cloud, ms, y), x, h) * ms.g**3),
        ]
        for got, ref in pairs:
            assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)) <= 1e-5

    @given(clouds(), taus)
    def test_jacobian_is_symmetric(self, cloud, tau):
        J = score_jacobian(cloud, VE.scaling(tau), np.ones((3, cloud.dim)))
        assert np.allclose(J, np.swapaxes(J, -1, -2))

    def test_grad_trace_uncentred_expansion(self, planar_cloud):
        # E|y|^2 y - E|y|^2 E y - 2 Cov(y) E y under the responsibilities
        ms = VP.scaling(0.6)
        x = np.array([[0.2, -0.1], [1.0, 1.0]])
        r = responsibilities(planar_cloud, ms, x)
        y = planar_cloud.atoms
        n2 = np.sum(y**2, axis=1)
        m = r @ y
        e_n2y = (r * n2) @ y
        e_n2 = r @ n2
        cov = np.einsum("bn,ni,nj->bij", r, y, y) - m[:, :, None] * m[:, None, :]
        third = e_n2y - e_n2[:, None] * m - 2 * np.einsum("bij,bj->bi", cov, m)
        assert np.allclose(grad_trace_hessian(planar_cloud, ms, x), ms.f**3 / ms.g**6 * third, rtol=1e-10)


class TestTimeDerivatives:
    def test_single_atom_at_origin_vp(self):
        c = AtomCloud.single([0.0])
        x = np.array([[0.8], [-2.0]])
        for t in (0.05, 0.5, 2.0):
            g2 = -math.expm1(-2 * t)
            dg2 = 2 * math.exp(-2 * t)
            ds, dtr = time_derivatives(c, VP, t, x)
            assert np.allclose(ds[:, 0], x[:, 0] * dg2 / g2**2, rtol=1e-7)
            assert np.allclose(dtr, dg2 / g2**2, rtol=1e-7)

    def test_single_atom_at_origin_ve(self):
        c = AtomCloud.single([0.0])
        x = np.array([[1.5]])
        ds, dtr = time_derivatives(c, VE, 0.3, x)
        assert ds[0, 0] == pytest.approx(1.5 / 0.09, rel=1e-8)
        assert dtr[0] == pytest.approx(1 / 0.09, rel=1e-8)

    def test_too_close_to_origin(self, two_atoms):
        with pytest.raises(DomainError):
            time_derivatives(two_atoms, VP, 0.0, np.zeros((1, 1)))
