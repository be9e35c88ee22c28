"""Total-variation metrology.

Quadrature routines work on one-dimensional windows (two-dimensional tensor
grids are supported without sign-change refinement).  Sign changes of
``p - q`` are located by linear interpolation inside each cell so the kink of
``|p - q|`` does not degrade the trapezoid rule.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr

from .errors import ComputationError, InputError
from .forward import GaussianPrior, MarginalLaw, make_rng
from .ode import dopri45
from .samplers import _invert, _logdet, coefficients

__all__ = [
    "DensityGrid",
    "density_grid",
    "TVResult",
    "law_window",
    "positive_part_integral",
    "tv_quadrature",
    "tv_monte_carlo",
    "gaussian_tv",
    "pushforward_log_density",
    "pushforward_density",
    "Drift",
    "transported_log_density",
    "lemma1_check",
    "counterexample_report",
    "gauss_legendre_panels",
]


# ---------------------------------------------------------------------------
# grids and windows


@dataclass(frozen=True)
class DensityGrid:
    points: np.ndarray
    values: np.ndarray
    cell: float

    def mass(self):
        return float(trapezoid(self.values, dx=self.cell))

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "value"])
        for x, v in zip(self.points, self.values):
            writer.writerow([repr(float(x)), repr(float(v))])
        return buf.getvalue()


def density_grid(density, lo, hi, n):
    x = np.linspace(lo, hi, n)
    values = np.asarray(density(x[:, None]), dtype=float)
    if np.any(values < 0):
        raise ComputationError("negative density values")
    return DensityGrid(x, values, (hi - lo) / (n - 1))


def law_window(*laws, width=10.0):
    """``[mu - width*sigma, mu + width*sigma]`` covering all given one-dimensional laws."""
    lows, highs = [], []
    for law in laws:
        if isinstance(law, GaussianPrior):
            mu, sd = 0.0, math.sqrt(law.variance)
        elif isinstance(law, MarginalLaw):
            ms = law.fs.scaling(law.tau)
            mu = float(ms.f * law.cloud.mean()[0])
            sd = math.sqrt(ms.f**2 * law.cloud.variance() + ms.g**2)
        else:
            mu, sd = law
        lows.append(mu - width * sd)
        highs.append(mu + width * sd)
    return min(lows), max(highs)


def gauss_legendre_panels(edges, order=8):
    """Nodes and weights of composite Gauss-Legendre on consecutive ``edges``."""
    edges = np.asarray(edges, dtype=float)
    g, w = np.polynomial.legendre.leggauss(order)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    nodes = mid[:, None] + half[:, None] * g
    weights = half[:, None] * w
    return nodes, weights


# ---------------------------------------------------------------------------
# quadrature


def positive_part_integral(x, diff, weight=None):
    """Trapezoid integral of ``weight`` over ``{diff > 0}`` on a uniform 1-D grid.

    ``weight`` defaults to ``diff`` itself (giving the excess mass).  Cells where
    ``diff`` changes sign are split at the linearly interpolated root.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(diff, dtype=float)
    w = d if weight is None else np.asarray(weight, dtype=float)
    h = np.diff(x)
    d0, d1 = d[:-1], d[1:]
    w0, w1 = w[:-1], w[1:]
    both = (d0 > 0) & (d1 > 0)
    total = float(np.sum(0.5 * h[both] * (w0[both] + w1[both])))
    mixed = (d0 > 0) != (d1 > 0)
    if np.any(mixed):
        a, b = d0[mixed], d1[mixed]
        frac = a / (a - b)  # root position within the cell, in [0, 1]
        wr = w0[mixed] + frac * (w1[mixed] - w0[mixed])
        hm = h[mixed]
        left = a > 0
        part = np.where(left, 0.5 * frac * hm * (w0[mixed] + wr), 0.5 * (1 - frac) * hm * (wr + w1[mixed]))
        total += float(np.sum(part))
    return total


@dataclass(frozen=True)
class TVResult:
    value: float
    refinement_error: float
    mass_deficit: float

    def as_dict(self):
        return {"tv": self.value, "refinement_error": self.refinement_error, "mass_deficit": self.mass_deficit}


def _tv_on_grid_1d(p, q, lo, hi, n):
    x = np.linspace(lo, hi, n)
    pv = np.asarray(p(x[:, None]), dtype=float)
    qv = np.asarray(q(x[:, None]), dtype=float)
    if not (np.all(np.isfinite(pv)) and np.all(np.isfinite(qv))):
        raise ComputationError("non-finite density values in TV quadrature")
    diff = pv - qv
    # average the two excess masses: symmetric in (p, q) and exact for equal masses
    tv = 0.5 * (positive_part_integral(x, diff) + positive_part_integral(x, -diff))
    deficit = max(abs(1 - trapezoid(pv, x)), abs(1 - trapezoid(qv, x)))
    return tv, deficit


def tv_quadrature(p, q, window, n=4001, dim=1):
    """``(1/2) int |p - q|`` on ``window`` with ``n`` nodes per axis.

    Returns the value on the refined grid (``2n - 1`` nodes per axis) and the
    change from the coarse grid as an error proxy.
    """
    if dim == 1:
        lo, hi = window
        coarse, _ = _tv_on_grid_1d(p, q, lo, hi, n)
        fine, deficit = _tv_on_grid_1d(p, q, lo, hi, 2 * n - 1)
        return TVResult(fine, abs(fine - coarse), deficit)
    if dim == 2:
        (lo0, hi0), (lo1, hi1) = window

        def on(m):
            a = np.linspace(lo0, hi0, m)
            b = np.linspace(lo1, hi1, m)
            pts = np.stack(np.meshgrid(a, b, indexing="ij"), axis=-1)
            gap = np.abs(p(pts) - q(pts))
            return 0.5 * float(trapezoid(trapezoid(gap, b, axis=1), a))

        coarse, fine = on(n), on(2 * n - 1)
        return TVResult(fine, abs(fine - coarse), float("nan"))
    raise InputError("quadrature TV supports d <= 2")


def gaussian_tv(mean_gap, sd=1.0):
    """TV between two Gaussians with equal covariance ``sd^2 I``: ``2 Phi(|mu|/(2 sd)) - 1``."""
    return float(2.0 * ndtr(np.linalg.norm(np.atleast_1d(mean_gap)) / (2.0 * sd)) - 1.0)


def tv_monte_carlo(p, q, proposal, n, seed):
    """Importance-sampled ``(1/2) E_r |p - q| / r``.

    ``proposal`` is ``((mean_p, var_p), (mean_q, var_q))`` describing the
    isotropic Gaussians mixed in equal parts.
    """
    (mp, vp), (mq, vq) = proposal
    mp, mq = np.atleast_1d(np.asarray(mp, dtype=float)), np.atleast_1d(np.asarray(mq, dtype=float))
    d = mp.shape[0]
    rng = make_rng(seed)
    pick = rng.random(n) < 0.5
    z = rng.standard_normal((n, d))
    x = np.where(pick[:, None], mp + math.sqrt(vp) * z, mq + math.sqrt(vq) * z)

    def logn(x, m, v):
        return -0.5 * np.sum((x - m) ** 2, axis=-1) / v - 0.5 * d * math.log(2 * math.pi * v)

    r = 0.5 * np.exp(logn(x, mp, vp)) + 0.5 * np.exp(logn(x, mq, vq))
    if np.any(r <= 0):
        raise ComputationError("proposal density vanished at a sample")
    vals = 0.5 * np.abs(p(x) - q(x)) / r
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# sampler pushforward


def pushforward_log_density(scheme, fs, field, grid, start, node, x):
    """Log density of the sampler output at ``node``: invert each step back to
    node 0 and subtract the accumulated step log-determinants."""
    x = np.asarray(x, dtype=float)
    acc = np.zeros(x.shape[:-1])
    z = x
    for k in range(int(node) - 1, -1, -1):
        co = coefficients(scheme, fs, grid.T, grid.nodes[k], grid.nodes[k + 1], grid.nodes[k + 1])
        try:
            z = _invert(co, field, z)
        except Exception as exc:
            raise type(exc)(f"inversion failed at node {k + 1}: {exc}") from exc
        acc = acc + _logdet(co, field, z)
    return start.log_density(z) - acc


def pushforward_density(run, node, x):
    return np.exp(pushforward_log_density(run.scheme, run.fs, run.field, run.grid, run.start, node, x))


# ---------------------------------------------------------------------------
# transport of densities along characteristics


@dataclass(frozen=True)
class Drift:
    """A drift ``b(t, x)`` with its divergence, for one-dimensional transport."""

    value: object
    divergence: object

    def __call__(self, t, x):
        return self.value(t, x)


def transported_log_density(drift, log_density0, t, x, tol=1e-10):
    """``log p(t, x)`` for ``p`` transported by ``drift`` from ``p(0) = exp(log_density0)``.

    Integrates the characteristic through ``x`` backwards to time 0 together with
    ``int div(drift)``; exact along trajectories (no numerical diffusion).
    """
    x = np.asarray(x, dtype=float)
    if t == 0:
        return log_density0(x)

    def aug(s, state):
        y = state[..., :1]
        return np.concatenate([drift.value(s, y), drift.divergence(s, y)[..., None]], axis=-1)

    state = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    out, _ = dopri45(aug, t, state, 0.0, rtol=tol, atol=tol)
    y0, log_jac = out[..., :1], out[..., 1]
    if not np.all(np.isfinite(out)):
        raise ComputationError("characteristic integration produced non-finite values")
    return log_density0(y0) + log_jac


def _tv_from_values(x, p, q):
    diff = p - q
    return 0.5 * (positive_part_integral(x, diff) + positive_part_integral(x, -diff))


def lemma1_check(b, b_star, q0_log_density, p0_log_density, times, window, n_points, dt, tol=1e-10):
    """Compare the finite-difference derivative of ``TV(p_t, q_t)`` with the
    excess-set integral

        -int_Omega (div b - div b*) q  -  int_Omega (b - b*) dq/dx,

    ``Omega = {p > q}``, where ``p`` is carried by ``b`` and ``q`` by ``b*``.
    Returns one row per time: ``t, tv, dtv_dt, rhs, residual, relative``.
    """
    lo, hi = window
    x = np.linspace(lo, hi, n_points)
    xc = x[:, None]
    rows = []
    for t in times:
        tv_at = []
        for s in (t - dt, t + dt):
            p = np.exp(transported_log_density(b, p0_log_density, s, xc, tol))
            q = np.exp(transported_log_density(b_star, q0_log_density, s, xc, tol))
            tv_at.append(_tv_from_values(x, p, q))
        dtv = (tv_at[1] - tv_at[0]) / (2 * dt)

        p = np.exp(transported_log_density(b, p0_log_density, t, xc, tol))
        q = np.exp(transported_log_density(b_star, q0_log_density, t, xc, tol))
        dq = np.gradient(q, x, edge_order=2)
        gap = (b.value(t, xc) - b_star.value(t, xc))[:, 0]
        div_gap = b.divergence(t, xc) - b_star.divergence(t, xc)
        integrand = -div_gap * q - gap * dq
        rhs = positive_part_integral(x, p - q, integrand)
        residual = abs(dtv - rhs)
        rows.append({
            "t": float(t),
            "tv": _tv_from_values(x, p, q),
            "dtv_dt": dtv,
            "rhs": rhs,
            "residual": residual,
            "relative": residual / max(abs(rhs), 1e-6),
        })
    return rows


# ---------------------------------------------------------------------------
# the smooth-but-wrong score example


def _phi(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def sine_tv_series(n):
    """``(1/4) int phi |sin(2 n pi x)|`` from the cosine series of ``|sin|``."""
    omega = 2 * math.pi * n
    total = 1 / (2 * math.pi)
    for k in range(1, 50):
        total -= math.exp(-2.0 * k * k * omega * omega) / (math.pi * (4 * k * k - 1))
    return total


def sine_tv_quadrature(n, half_width=12.0, order=10):
    """``(1/4) int phi |sin(2 n pi x)|`` by Gauss-Legendre between consecutive zeros."""
    m = int(math.ceil(half_width * 2 * n))
    edges = np.arange(-m, m + 1) / (2.0 * n)
    nodes, weights = gauss_legendre_panels(edges, order)
    return 0.25 * float(np.sum(weights * _phi(nodes) * np.abs(np.sin(2 * math.pi * n * nodes))))


def fokker_planck_residual(field, n_t=401, n_x=401, x_range=(-5.0, 5.0)):
    """Cell-averaged residual of ``d/dt qhat + d/dx [(s + x) qhat] = 0``.

    Per cell ``[x_j, x_{j+1}]`` and time ``t_i``: the time derivative of the cell
    mass (central difference of Gauss-Legendre cell integrals of ``qhat``)
    plus the net flux ``(s + x) qhat`` through the cell edges, the flux coming
    from the field's own evaluation.  Divided by the cell width.
    """
    T = field.T
    t = np.linspace(0.0, T, n_t)
    x = np.linspace(x_range[0], x_range[1], n_x)
    h_t = T / (n_t - 1)
    nodes, weights = gauss_legendre_panels(x, order=12)

    def cell_mass(tt):
        tau = min(max(T - tt, 0.0), T)
        return np.sum(weights * field.path_density(tau, nodes), axis=1)

    worst = 0.0
    for ti in t:
        lo, hi = max(ti - h_t, 0.0), min(ti + h_t, T)
        dmass = (cell_mass(hi) - cell_mass(lo)) / (hi - lo)
        tau = T - ti
        flux = (field.score(tau, x) + x) * field.path_density(tau, x)
        residual = (dmass + np.diff(flux)) / np.diff(x)
        worst = max(worst, float(np.max(np.abs(residual))))
    return worst


def counterexample_report(n, T, n_t=401, n_x=401, particles=33, tol=1e-9):
    """Checks for the smooth counterexample field on ``[0, T] x [-5, 5]``."""
    from .forward import VP
    from .samplers import continuous_reference
    from .scores import sine_counterexample_field

    field = sine_counterexample_field(n, T)
    t = np.linspace(0.0, T, n_t)
    x = np.linspace(-5.0, 5.0, n_x)
    sup_err = 0.0
    for ti in t:
        err = np.abs(field.score(T - ti, x) + x)
        sup_err = max(sup_err, float(err.max()))
    bound = 1.0 / (T * n * math.pi)

    tv_exact = sine_tv_series(n)
    tv_quad = sine_tv_quadrature(n)
    final = lambda y: _phi(y[..., 0]) * (1 + 0.5 * np.sin(2 * math.pi * n * y[..., 0]))
    gauss = lambda y: _phi(y[..., 0])
    tv_grid = tv_quadrature(final, gauss, (-10.0, 10.0), n=200_001)

    residual = fokker_planck_residual(field, n_t, n_x)

    # cross-check: carry N(0, 1) quantile points along the simulated reverse ODE
    y0 = np.linspace(-3.0, 3.0, particles)[:, None]
    yT, logdet = continuous_reference(VP, field, T, 0.0, T, y0, tol=tol, with_logdet=True)
    pushed = _phi(y0[:, 0]) * np.exp(-logdet)
    target = final(yT)
    transport_err = float(np.max(np.abs(pushed / target - 1.0)))

    return {
        "n": n,
        "T": T,
        "sup_score_error": sup_err,
        "sup_score_bound": bound,
        "tv_final": tv_quad,
        "tv_series": tv_exact,
        "tv_grid": tv_grid.value,
        "tv_lower_bound": 1.0 / (4.0 * math.pi),
        "fp_residual": residual,
        "transport_rel_error": transport_err,
    }
