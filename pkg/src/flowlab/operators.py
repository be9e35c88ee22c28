"""Per-step error operators of the samplers and numerical bound certificates.

The operators compare the interpolated sampler dynamics with the true reverse
drift.  With ``F(t, z) = alpha z + beta s(T - t_k, z)`` and reverse drift
``-a y + (sigma^2/2) grad log q``:

    Phi(t, z) = dF/dt + a F(t, z) - (sigma^2/2) grad log q_{T - t_k}(z)
    Psi(t, z) = grad dF/dt + a grad F(t, z) - (sigma^2/2) hess log q_{T - t_k}(z)

Certificates evaluate ``measured / bound`` ratios over probe sets.  Bounds with
a known constant must give ratios at most ``1 + 1e-9``; bounds known only up
to a constant are compared against a cap.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.integrate import trapezoid

from .analytic import (
    MarginalScaling,
    grad_trace_hessian,
    log_marginal_density,
    score,
    score_divergence,
    score_jacobian,
    time_derivatives,
)
from .errors import ComputationError, InputError, SingularMapError
from .forward import (
    MarginalLaw,
    make_rng,
    moment_bound,
    moment_bound_is_exact,
    prior,
    prior_tv_bound,
    sample_marginal,
    tweedie_second_moment_bound,
)
from .samplers import _invert, coefficients
from .scores import lipschitz_probe
from .tv import (
    Drift,
    _tv_from_values,
    gauss_legendre_panels,
    law_window,
    pushforward_log_density,
    transported_log_density,
    tv_quadrature,
)

__all__ = [
    "estimation_error_operator",
    "divergence_error_operator",
    "estimation_error_closed_form",
    "divergence_error_closed_form",
    "BoundCertificate",
    "make_certificate",
    "probe_points",
    "certify_score_bounds",
    "certify_time_derivative_bounds",
    "time_derivative_bounds",
    "gaussian_ratio_certificate",
    "moment_certificates",
    "tweedie_certificate",
    "pinsker_certificate",
    "continuous_flow_certificate",
    "theorem3_terms",
]

EXACT_SLACK = 1e-9


# ---------------------------------------------------------------------------
# operators


def estimation_error_operator(scheme, fs, field, cloud, T, t_k, t_next, t, z):
    """``Phi_k(t, z)`` assembled from the interpolant and the exact score of ``cloud``."""
    co = coefficients(scheme, fs, T, t_k, t_next, t)
    z = np.asarray(z, dtype=float)
    s = field.score(co.tau, z)
    dF = co.alpha_dot * z + co.beta_dot * s
    F = co.alpha * z + co.beta * s
    true = score(cloud, fs.scaling(co.tau), z)
    return dF + fs.drift_rate * F - 0.5 * fs.diffusion_sq(co.tau) * true


def divergence_error_operator(scheme, fs, field, cloud, T, t_k, t_next, t, z):
    """``Psi_k(t, z)``, shape ``(..., d, d)``."""
    co = coefficients(scheme, fs, T, t_k, t_next, t)
    z = np.asarray(z, dtype=float)
    eye = np.eye(z.shape[-1])
    J = field.jacobian(co.tau, z)
    dF = co.alpha_dot * eye + co.beta_dot * J
    gF = co.alpha * eye + co.beta * J
    hess = score_jacobian(cloud, fs.scaling(co.tau), z)
    return dF + fs.drift_rate * gF - 0.5 * fs.diffusion_sq(co.tau) * hess


def _closed_form_factor(scheme, fs, T, t_k, t_next):
    """``(c, w)`` with ``Phi = c s - w grad log q`` for VP+EI and VE+DDIM."""
    from .samplers import ddim_coefficient, scheme_name

    scheme = scheme_name(scheme)
    if fs.kind == "VP" and scheme == "ei":
        return 1.0, 1.0
    if fs.kind == "VE" and scheme == "ddim":
        return ddim_coefficient((T - t_k) / (t_next - t_k)), 0.5
    raise InputError("closed forms exist for VP with 'ei' and VE with 'ddim' only")


def estimation_error_closed_form(scheme, fs, field, cloud, T, t_k, t_next, z):
    """``s - grad log q`` (VP+EI) or ``c_l s - grad log q / 2`` (VE+DDIM); free of ``t``."""
    c, w = _closed_form_factor(scheme, fs, T, t_k, t_next)
    tau = T - t_k
    return c * field.score(tau, z) - w * score(cloud, fs.scaling(tau), z)


def divergence_error_closed_form(scheme, fs, field, cloud, T, t_k, t_next, z):
    c, w = _closed_form_factor(scheme, fs, T, t_k, t_next)
    tau = T - t_k
    return c * field.jacobian(tau, z) - w * score_jacobian(cloud, fs.scaling(tau), z)


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class BoundCertificate:
    bound_name: str
    params: dict
    probes: int
    max_ratio: float
    passed: bool
    exact_constant: bool
    cap: float = 1.0
    extra: dict = dc_field(default_factory=dict)

    def as_row(self):
        row = {"bound_name": self.bound_name}
        row.update({f"param_{k}": v for k, v in sorted(self.params.items())})
        row.update({"probes": self.probes, "max_ratio": self.max_ratio, "pass": self.passed,
                    "exact_constant": self.exact_constant, "cap": self.cap})
        return row

    def as_dict(self):
        return {
            "bound_name": self.bound_name,
            "params": self.params,
            "probes": self.probes,
            "max_ratio": self.max_ratio,
            "pass": self.passed,
            "exact_constant": self.exact_constant,
            "cap": self.cap,
            **({"extra": self.extra} if self.extra else {}),
        }


def make_certificate(name, params, measured, bound, exact_constant, cap=10.0, extra=None):
    """Build a certificate from arrays of measured values and bounds.

    ``0/0`` counts as ratio 0; a positive value over a zero bound is infinite.
    Non-finite ratios fail.
    """
    measured = np.abs(np.asarray(measured, dtype=float)).ravel()
    bound = np.asarray(bound, dtype=float).ravel()
    bound = np.broadcast_to(bound, measured.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(measured == 0.0, 0.0, measured / bound)
    ratio = np.where(bound < 0, np.inf, ratio)
    max_ratio = float(np.max(ratio)) if ratio.size else 0.0
    if np.any(np.isnan(ratio)):
        max_ratio = float("nan")
    limit = 1.0 + EXACT_SLACK if exact_constant else float(cap)
    passed = bool(np.isfinite(max_ratio) and max_ratio <= limit)
    return BoundCertificate(name, dict(params), int(measured.size), max_ratio, passed, bool(exact_constant),
                            1.0 if exact_constant else float(cap), dict(extra or {}))


def probe_points(cloud, fs, taus, count, seed, spread=3.0):
    """Probe points per time: half drawn from ``q_tau``, half uniform on a box
    of half-width ``f R + spread g + 1``.  Returns ``(len(taus), count, d)``."""
    d = cloud.dim
    out = np.empty((len(taus), count, d))
    for i, tau in enumerate(taus):
        ms = fs.scaling(tau)
        half = count // 2
        out[i, :half] = sample_marginal(cloud, fs, tau, half, make_rng(seed, i, 0).integers(2**62))
        box = ms.f * cloud.radius + spread * ms.g + 1.0
        out[i, half:] = make_rng(seed, i, 1).uniform(-box, box, size=(count - half, d))
    return out


def certify_score_bounds(cloud, fs, taus, points):
    """Score, Hessian and trace-gradient norms against their linear-in-``|x|`` bounds.

    ``points`` has shape ``(len(taus), P, d)`` (or ``(P, d)`` shared by all times).
    """
    R = cloud.radius
    names = ("score_norm", "hessian_norm", "trace_gradient_norm")
    meas = {n: [] for n in names}
    bnd = {n: [] for n in names}
    for i, tau in enumerate(taus):
        x = points[i] if np.ndim(points) == 3 else np.asarray(points, dtype=float)
        ms = fs.scaling(tau)
        f, g2 = ms.f, ms.g**2
        meas["score_norm"].append(np.linalg.norm(score(cloud, ms, x), axis=-1))
        bnd["score_norm"].append((np.linalg.norm(x, axis=-1) + f * R) / g2)
        meas["hessian_norm"].append(np.linalg.norm(score_jacobian(cloud, ms, x), ord=2, axis=(-2, -1)))
        bnd["hessian_norm"].append(np.full(len(x), (1.0 + 2.0 * R**2 * f**2 / g2) / g2))
        meas["trace_gradient_norm"].append(np.linalg.norm(grad_trace_hessian(cloud, ms, x), axis=-1))
        bnd["trace_gradient_norm"].append(np.full(len(x), 6.0 * f**3 * R**3 / g2**3))
    params = {"forward": fs.kind, "radius": R, "dim": cloud.dim}
    return [make_certificate(n, params, np.concatenate(meas[n]), np.concatenate(bnd[n]), True) for n in names]


def time_derivative_bounds(fs, R, d, tau, x):
    """Order-only bounds on ``|d/dt score|`` and ``|d/dt div score|`` at forward time ``tau``."""
    r = np.linalg.norm(x, axis=-1) + R
    m = fs.noise_floor(tau)
    if fs.kind == "VP":
        b_score = r / m**2 + r**2 * R**2 / m**2 + r**3 / m**3
    else:
        b_score = r / m**2 + r**3 / m**3
    b_trace = d / m**2 + R**2 * r**2 / m**4
    return b_score, b_trace


def certify_time_derivative_bounds(cloud, fs, taus, points, cap=10.0):
    """Finite-difference time derivatives against the order-only bounds."""
    R, d = cloud.radius, cloud.dim
    ms_, bs_, mt_, bt_ = [], [], [], []
    for i, tau in enumerate(taus):
        x = points[i] if np.ndim(points) == 3 else np.asarray(points, dtype=float)
        ds, dtr = time_derivatives(cloud, fs, tau, x)
        if not (np.all(np.isfinite(ds)) and np.all(np.isfinite(dtr))):
            raise ComputationError(f"non-finite time derivative at tau={tau!r}")
        b_score, b_trace = time_derivative_bounds(fs, R, d, tau, x)
        ms_.append(np.linalg.norm(ds, axis=-1))
        bs_.append(b_score)
        mt_.append(np.abs(dtr))
        bt_.append(b_trace)
    params = {"forward": fs.kind, "radius": R, "dim": d, "tau_min": float(min(taus))}
    return [
        make_certificate("score_time_derivative", params, np.concatenate(ms_), np.concatenate(bs_), False, cap),
        make_certificate("trace_time_derivative", params, np.concatenate(mt_), np.concatenate(bt_), False, cap),
    ]


def gaussian_ratio_certificate(cloud, delta, h, points):
    """``sup p_{X+Z_delta} / p_{X+Z_{delta+h}}`` against ``((delta + h)/delta)^{d/2}``."""
    if not (delta > 0 and h >= 0):
        raise InputError("need delta > 0 and h >= 0")
    x = np.asarray(points, dtype=float)
    lp = log_marginal_density(cloud, MarginalScaling(1.0, math.sqrt(delta)), x)
    lq = log_marginal_density(cloud, MarginalScaling(1.0, math.sqrt(delta + h)), x)
    ratio = np.exp(lp - lq)
    bound = ((delta + h) / delta) ** (cloud.dim / 2.0)
    return make_certificate("gaussian_ratio", {"delta": delta, "h": h, "dim": cloud.dim}, ratio, bound, True)


def _moment_exact(cloud, fs, tau, order):
    # E|f y + g Z|^order for order 2 and 4, Z standard normal in R^d
    ms = fs.scaling(tau)
    f2, g2, d = ms.f**2, ms.g**2, cloud.dim
    y2 = np.sum(cloud.atoms**2, axis=-1)
    if order == 2:
        return float(cloud.weights @ (f2 * y2) + g2 * d)
    return float(cloud.weights @ (f2**2 * y2**2 + (4.0 + 2.0 * d) * f2 * g2 * y2) + g2**2 * (d * d + 2 * d))


def moment_certificates(cloud, fs, taus, orders=(1, 2, 3, 4), samples=200_000, seed=0, cap=10.0):
    """``E|Y|^p`` under ``q_tau`` against the moment bounds.

    Orders 2 and 4 are exact closed forms; 1 and 3 are Monte Carlo means.
    """
    certs = []
    for order in orders:
        measured, bounds = [], []
        for i, tau in enumerate(taus):
            if order in (2, 4):
                measured.append(_moment_exact(cloud, fs, tau, order))
            else:
                y = sample_marginal(cloud, fs, tau, samples, make_rng(seed, order, i).integers(2**62))
                measured.append(float(np.mean(np.linalg.norm(y, axis=-1) ** order)))
            bounds.append(moment_bound(fs, cloud, tau, order))
        exact = moment_bound_is_exact(fs, order)
        params = {"forward": fs.kind, "order": order, "radius": cloud.radius, "dim": cloud.dim}
        certs.append(make_certificate(f"moment_{order}", params, measured, bounds, exact, cap))
    return certs


def tweedie_certificate(cloud, fs, taus, samples, seed):
    """``E|grad log q_tau|^2`` by Monte Carlo; ratio ``mean / (bound + 3 stderr)``."""
    measured, bounds = [], []
    for i, tau in enumerate(taus):
        y = sample_marginal(cloud, fs, tau, samples, make_rng(seed, i).integers(2**62))
        sq = np.sum(score(cloud, fs.scaling(tau), y) ** 2, axis=-1)
        se = float(sq.std(ddof=1) / math.sqrt(samples))
        measured.append(float(sq.mean()))
        bounds.append(tweedie_second_moment_bound(fs, tau, cloud.dim) + 3.0 * se)
    params = {"forward": fs.kind, "dim": cloud.dim, "samples": samples}
    return make_certificate("tweedie_second_moment", params, measured, bounds, True)


def pinsker_certificate(cloud, Ts, n=4001):
    """VE: ``TV(q_T, N(0, T I))`` by quadrature (d <= 2) against ``sqrt(E|X_0|^2 / (4T))``."""
    from .forward import VE

    d = cloud.dim
    if d > 2:
        raise InputError("quadrature TV needs d <= 2")
    measured, bounds, errors = [], [], []
    for T in Ts:
        q = MarginalLaw(cloud, VE, T)
        pi = prior(VE, T, d)
        if d == 1:
            window = law_window(q, pi)
        else:
            half = 10.0 * math.sqrt(T + cloud.second_moment())
            window = ((-half, half), (-half, half))
        res = tv_quadrature(q.density, pi.density, window, n=n if d == 1 else 401, dim=d)
        measured.append(res.value)
        errors.append(res.refinement_error)
        bounds.append(prior_tv_bound(VE, cloud, T))
    return make_certificate("ve_prior_pinsker", {"dim": d, "T_min": float(min(Ts))}, measured, bounds, True,
                            extra={"max_refinement_error": float(max(errors))})


# ---------------------------------------------------------------------------
# continuous-time TV certificate (d = 1, VP)


def _error_integrals(field, cloud, fs, T, delta, n_x=2001, panels=48, order=8):
    """``int E|s - s*|^2`` and ``int E|div s - div s*|`` over reverse times ``[0, T - delta]``."""
    edges = np.geomspace(delta, T, panels + 1)
    taus, weights = gauss_legendre_panels(edges, order)
    sq_total, div_total = 0.0, 0.0
    for tau, w in zip(taus.ravel(), weights.ravel()):
        law = MarginalLaw(cloud, fs, tau)
        lo, hi = law_window(law)
        x = np.linspace(lo, hi, n_x)[:, None]
        q = law.density(x)
        ms = fs.scaling(tau)
        gap = field.score(tau, x)[:, 0] - score(cloud, ms, x)[:, 0]
        dgap = field.divergence(tau, x) - score_divergence(cloud, ms, x)
        sq_total += w * trapezoid(gap**2 * q, x[:, 0])
        div_total += w * trapezoid(np.abs(dgap) * q, x[:, 0])
    return float(sq_total), float(div_total)


def continuous_flow_certificate(cloud, field, T, delta, tol=1e-9, n_x=1001):
    """Measured ``TV(Yhat_{T-delta}, q_delta)`` for the continuous simulated flow
    started at the prior, against ``TV(prior, q_T) + sqrt(dT + d log(1/delta)) eps_score + eps_div``.

    The exact flow started at ``q_T`` has law ``q_delta`` at ``T - delta``, so its
    density is analytic.  The simulated flow's density comes from backward
    characteristics.
    """
    from .forward import VP

    fs = VP
    if cloud.dim != 1:
        raise InputError("the continuous certificate is one-dimensional")
    d = 1
    pi = prior(fs, T, d)
    qT = MarginalLaw(cloud, fs, T)
    q_delta = MarginalLaw(cloud, fs, delta)

    drift = Drift(lambda t, y: y + field.score(T - t, y), lambda t, y: 1.0 + field.divergence(T - t, y))
    p_hat = lambda x: np.exp(transported_log_density(drift, pi.log_density, T - delta, x, tol))
    window = law_window(q_delta, pi)
    measured = tv_quadrature(p_hat, q_delta.density, window, n=n_x)
    tv0 = tv_quadrature(pi.density, qT.density, law_window(pi, qT), n=4001)

    eps_sq, eps_div = _error_integrals(field, cloud, fs, T, delta)
    eps_score = math.sqrt(eps_sq)
    factor = math.sqrt(d * T + d * math.log(1.0 / delta))
    bound = tv0.value + factor * eps_score + eps_div
    quad_tol = measured.refinement_error + tv0.refinement_error + 1e-9
    return {
        "T": T,
        "delta": delta,
        "measured_tv": measured.value,
        "measured_refinement_error": measured.refinement_error,
        "prior_tv": tv0.value,
        "eps_score": eps_score,
        "eps_div": eps_div,
        "score_term": factor * eps_score,
        "bound": bound,
        "ratio": measured.value / bound if bound > 0 else float("inf"),
        "quadrature_tolerance": quad_tol,
        "holds": bool(measured.value <= bound + quad_tol),
    }


# ---------------------------------------------------------------------------
# five-term discretization bound (d = 1)


def _clip_log(log_p, floor=math.log(1e-300)):
    return log_p < floor


def theorem3_terms(scheme, fs, field, cloud, grid, n_x=4001, order=8, width=10.0):
    """Evaluate the five per-step discretization terms and check the inequality

        TV(q_delta, law of Yhat_{t_N}) <= TV(q_T, prior) + sum_k int (I + II + III + IV + V) dt.

    Terms at reverse time ``t`` in step ``k`` (``tau_k = T - t_k``, ``z = F^{-1}(x)``,
    ``p_F`` the law of ``F(Y_{t_k})`` with ``Y_{t_k} ~ q_{tau_k}``):

    * I   ``sqrt(E_{q_{tau_k}} Phi^2) * sqrt(int (d log q_{T-t})^2 q_{T-t}^2 / p_F)``
    * II  ``sqrt(E_{q_{tau_k}} Psi^2) * sqrt(int q_{T-t}^2 / p_F)``
    * III ``(sigma^2/2) int |(s*_{tau_k}(z) - s*_{T-t}(x)) s*_{T-t}(x)| q_{T-t}``
    * IV  ``(sigma^2/2) int |h*_{tau_k}(z) - h*_{T-t}(x)| q_{T-t}``
    * V   ``max_x |(grad dF/dt + a grad F)(1/grad F - 1)|`` over the window

    Ratios with ``p_F < 1e-300`` are clipped to zero; the ``q_{T-t}`` mass on the
    clipped set is reported.
    """
    if cloud.dim != 1:
        raise InputError("the five-term evaluation is one-dimensional")
    T, nodes = grid.T, grid.nodes
    a = fs.drift_rate
    pi = prior(fs, T, 1)
    window = law_window(pi, MarginalLaw(cloud, fs, T), MarginalLaw(cloud, fs, grid.delta), width=width)
    x = np.linspace(window[0], window[1], n_x)
    xc = x[:, None]

    rows = []
    clipped = 0.0
    gl, glw = np.polynomial.legendre.leggauss(order)
    for k in range(grid.N):
        t_k, t_next = float(nodes[k]), float(nodes[k + 1])
        tau_k = T - t_k
        ms_k = fs.scaling(tau_k)
        q_k_on_x = np.exp(log_marginal_density(cloud, ms_k, xc))
        ts = 0.5 * (t_k + t_next) + 0.5 * (t_next - t_k) * gl
        ws = 0.5 * (t_next - t_k) * glw
        acc = np.zeros(5)
        for t, w in zip(ts, ws):
            co = coefficients(scheme, fs, T, t_k, t_next, t)
            sig2 = fs.diffusion_sq(T - t)
            phi = estimation_error_operator(scheme, fs, field, cloud, T, t_k, t_next, t, xc)[:, 0]
            psi = divergence_error_operator(scheme, fs, field, cloud, T, t_k, t_next, t, xc)[:, 0, 0]
            e_phi = trapezoid(phi**2 * q_k_on_x, x)
            e_psi = trapezoid(psi**2 * q_k_on_x, x)

            try:
                z = _invert(co, field, xc)
            except SingularMapError as exc:
                raise SingularMapError(f"step {k}, t={t:.6g}: {exc}", exc.residual, exc.location) from exc
            Fp = co.alpha + co.beta * field.jacobian(co.tau, z)[:, 0, 0]
            log_pF = log_marginal_density(cloud, ms_k, z) - np.log(np.abs(Fp))
            ms_t = fs.scaling(T - t)
            log_qt = log_marginal_density(cloud, ms_t, xc)
            qt = np.exp(log_qt)
            st = score(cloud, ms_t, xc)[:, 0]
            ht = score_jacobian(cloud, ms_t, xc)[:, 0, 0]

            clip = _clip_log(log_pF)
            with np.errstate(over="ignore"):
                ratio = np.where(clip, 0.0, np.exp(np.where(clip, 0.0, 2.0 * log_qt - log_pF)))
            clipped = max(clipped, float(trapezoid(np.where(clip, qt, 0.0), x)))
            i_val = math.sqrt(e_phi) * math.sqrt(trapezoid(st**2 * ratio, x))
            ii_val = math.sqrt(e_psi) * math.sqrt(trapezoid(ratio, x))

            sk = score(cloud, ms_k, z)[:, 0]
            hk = score_jacobian(cloud, ms_k, z)[:, 0, 0]
            iii_val = 0.5 * sig2 * trapezoid(np.abs((sk - st) * st) * qt, x)
            iv_val = 0.5 * sig2 * trapezoid(np.abs(hk - ht) * qt, x)

            J = field.jacobian(co.tau, z)[:, 0, 0]
            lead = co.alpha_dot + co.beta_dot * J + a * (co.alpha + co.beta * J)
            v_val = float(np.max(np.abs(lead * (1.0 / Fp - 1.0))))
            acc += w * np.array([i_val, ii_val, iii_val, iv_val, v_val])
        if not np.all(np.isfinite(acc)):
            raise ComputationError(f"non-finite term at step {k}")
        rows.append({"k": k, "t_k": t_k, "t_next": t_next, "I": acc[0], "II": acc[1], "III": acc[2],
                     "IV": acc[3], "V": acc[4]})

    # left-hand side on the grid and on every other grid point
    log_p = pushforward_log_density(scheme, fs, field, grid, pi, grid.N, xc)
    p_final = np.exp(log_p)
    q_final = np.exp(log_marginal_density(cloud, fs.scaling(grid.delta), xc))
    lhs = _tv_from_values(x, p_final, q_final)
    lhs_coarse = _tv_from_values(x[::2], p_final[::2], q_final[::2])
    tv0 = tv_quadrature(MarginalLaw(cloud, fs, T).density, pi.density, window, n=n_x)

    totals = {key: float(sum(r[key] for r in rows)) for key in ("I", "II", "III", "IV", "V")}
    rhs = tv0.value + sum(totals.values())
    quad_tol = abs(lhs - lhs_coarse) + tv0.refinement_error + 1e-9
    L = max(lipschitz_probe(field, T - t, max(abs(window[0]), abs(window[1]))) for t in nodes[:-1])
    return {
        "rows": rows,
        "totals": totals,
        "lhs": lhs,
        "prior_tv": tv0.value,
        "rhs": rhs,
        "slack": rhs - lhs,
        "quadrature_tolerance": quad_tol,
        "clipped_mass": clipped,
        "eta_L": float(grid.eta * L),
        "holds": bool(lhs <= rhs + quad_tol),
    }
