"""Deterministic reverse-time samplers and their continuous interpolants.

Reverse time ``t`` runs from 0 to ``T - delta``; the score is queried at the
forward time ``T - t``.  Every scheme's interpolant on ``[t_k, t_{k+1}]`` has
the affine-in-score form

    F(t, z) = alpha(t) z + beta(t) s(T - t_k, z)

so values, time derivatives, Jacobians, inverses and log-determinants all
share one set of coefficients.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SingularMapError, UnsupportedSchemeError
from .forward import GaussianPrior, MarginalLaw, prior
from .ode import dopri45

__all__ = [
    "SCHEMES",
    "scheme_name",
    "ddim_coefficient",
    "StepCoefficients",
    "coefficients",
    "step",
    "interpolant",
    "interpolant_time_derivative",
    "interpolant_jacobian",
    "interpolant_time_derivative_jacobian",
    "invert_interpolant",
    "step_logdet",
    "ReverseRun",
    "run_reverse",
    "reverse_drift",
    "continuous_reference",
]

SCHEMES = ("euler", "ei", "ddim")
_ALIASES = {
    "euler": "euler",
    "ei": "ei",
    "exponentialintegrator": "ei",
    "exponential_integrator": "ei",
    "ddim": "ddim",
    "ddimtype": "ddim",
}


def scheme_name(scheme):
    key = str(scheme).lower().replace("-", "_")
    if key not in _ALIASES:
        raise InputError(f"unknown sampler scheme {scheme!r}")
    return _ALIASES[key]


def ddim_coefficient(l):
    """``c_l = l (1 - sqrt(1 - 1/l))``, written as ``1 / (1 + sqrt(1 - 1/l))`` to
    avoid cancellation for large ``l``; lies in ``[1/2, 1]``."""
    if l < 1.0:
        raise InputError(f"DDIM needs l >= 1, got l={l!r}")
    return 1.0 / (1.0 + math.sqrt(1.0 - 1.0 / l))


@dataclass(frozen=True)
class StepCoefficients:
    alpha: float
    beta: float
    alpha_dot: float
    beta_dot: float
    tau: float  # forward time at which the score is frozen


def coefficients(scheme, fs, T, t_k, t_next, t):
    """Coefficients of ``F(t, z) = alpha z + beta s(T - t_k, z)`` and of its
    time derivative ``alpha_dot z + beta_dot s``."""
    scheme = scheme_name(scheme)
    t_k, t_next, t = float(t_k), float(t_next), float(t)
    if not t_next > t_k:
        raise InputError("need t_k < t_next")
    slack = 1e-12 * max(1.0, abs(t_next))
    if not (t_k - slack <= t <= t_next + slack):
        raise InputError(f"t={t!r} lies outside [{t_k!r}, {t_next!r}]")
    t = min(max(t, t_k), t_next)
    dt = t - t_k
    a = fs.drift_rate
    g2 = fs.diffusion_sq(T - t_k)
    tau = T - t_k
    if scheme == "euler":
        return StepCoefficients(1.0 - a * dt, 0.5 * g2 * dt, -a, 0.5 * g2, tau)
    if scheme == "ei":
        if fs.kind != "VP":
            raise UnsupportedSchemeError("the exponential integrator needs the linear VP drift")
        grow = math.exp(dt)
        return StepCoefficients(grow, math.expm1(dt), grow, grow, tau)
    c = ddim_coefficient((T - t_k) / (t_next - t_k))
    return StepCoefficients(1.0 - a * dt, c * g2 * dt, -a, c * g2, tau)


def _apply(co, field, z):
    z = np.asarray(z, dtype=float)
    if co.beta == 0.0:
        return co.alpha * z
    return co.alpha * z + co.beta * field.score(co.tau, z)


def interpolant(scheme, fs, field, T, t_k, t_next, t, z):
    """``F_{t_k -> t}(z)``."""
    return _apply(coefficients(scheme, fs, T, t_k, t_next, t), field, z)


def step(scheme, fs, field, T, t_k, t_next, x):
    """One sampler step from ``t_k`` to ``t_next``."""
    return interpolant(scheme, fs, field, T, t_k, t_next, t_next, x)


def interpolant_time_derivative(scheme, fs, field, T, t_k, t_next, t, z):
    co = coefficients(scheme, fs, T, t_k, t_next, t)
    z = np.asarray(z, dtype=float)
    return co.alpha_dot * z + co.beta_dot * field.score(co.tau, z)


def interpolant_time_derivative_jacobian(scheme, fs, field, T, t_k, t_next, t, z):
    """Spatial Jacobian of ``dF/dt``."""
    co = coefficients(scheme, fs, T, t_k, t_next, t)
    z = np.asarray(z, dtype=float)
    return co.alpha_dot * np.eye(z.shape[-1]) + co.beta_dot * field.jacobian(co.tau, z)


def _jacobian(co, field, z):
    z = np.asarray(z, dtype=float)
    eye = np.eye(z.shape[-1])
    if co.beta == 0.0:
        return np.broadcast_to(co.alpha * eye, z.shape + (z.shape[-1],)).copy()
    return co.alpha * eye + co.beta * field.jacobian(co.tau, z)


def interpolant_jacobian(scheme, fs, field, T, t_k, t_next, t, z):
    return _jacobian(coefficients(scheme, fs, T, t_k, t_next, t), field, z)


def _logdet(co, field, z):
    sign, logabs = np.linalg.slogdet(_jacobian(co, field, z))
    if not np.all(np.isfinite(logabs)):
        raise SingularMapError("step Jacobian is singular or non-finite")
    return logabs


def step_logdet(scheme, fs, field, T, t_k, t_next, t, z):
    """``log |det grad F_{t_k -> t}(z)|``."""
    return _logdet(coefficients(scheme, fs, T, t_k, t_next, t), field, z)


def _solve(jac, r):
    if jac.shape[-1] == 1:
        return r / jac[..., 0]
    return np.linalg.solve(jac, r[..., None])[..., 0]


def _invert(co, field, x, tol=1e-12, max_iter=100):
    x = np.asarray(x, dtype=float)
    if co.beta == 0.0:
        return x / co.alpha
    squeeze = x.ndim == 1
    xb = np.atleast_2d(x).reshape(-1, x.shape[-1])
    target = tol * (1.0 + np.linalg.norm(xb, axis=-1))

    z = (xb - co.beta * field.score(co.tau, xb)) / co.alpha
    res = _apply(co, field, z) - xb
    rn = np.linalg.norm(res, axis=-1)
    active = ~(rn <= target)  # NaN residuals stay active
    # a singular Jacobian gives inf/NaN steps; those points stay active for the fallback
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(max_iter):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            za, ra, rna = z[idx], res[idx], rn[idx]
            dz = _solve(_jacobian(co, field, za), ra)
            lam = np.ones(len(idx))
            for _ in range(40):
                trial = za - lam[:, None] * dz
                rt = _apply(co, field, trial) - xb[idx]
                rnt = np.linalg.norm(rt, axis=-1)
                worse = ~((rnt < rna) | (rnt <= target[idx]))
                if not worse.any():
                    break
                lam[worse] *= 0.5
            z[idx], res[idx], rn[idx] = trial, rt, rnt
            active = ~(rn <= target)

    if active.any():
        # damped fixed-point fallback z <- z - (F(z) - x) / alpha
        idx = np.flatnonzero(active)
        za = z[idx]
        with np.errstate(all="ignore"):
            for _ in range(2000):
                ra = _apply(co, field, za) - xb[idx]
                za = za - 0.5 * ra / co.alpha
            rna = np.linalg.norm(_apply(co, field, za) - xb[idx], axis=-1)
        rna = np.where(np.isfinite(rna), rna, np.inf)
        z[idx], rn[idx] = za, rna
        active = ~(rn <= target)
        if active.any():
            worst = int(idx[np.argmax(rna)])
            raise SingularMapError(
                f"interpolant inversion did not converge (residual {rn.max():.3e})",
                residual=float(rn.max()),
                location=xb[worst].tolist(),
            )
    return z[0] if squeeze else z.reshape(x.shape)


def invert_interpolant(scheme, fs, field, T, t_k, t_next, t, x, tol=1e-12):
    """Solve ``F_{t_k -> t}(z) = x`` by damped Newton with the analytic Jacobian."""
    return _invert(coefficients(scheme, fs, T, t_k, t_next, t), field, x, tol)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class ReverseRun:
    """Particles pushed through every node of a grid.

    ``states`` has shape ``(particles, N+1, d)``; ``logdet`` holds the cumulative
    ``log |det d(state_k)/d(state_0)|`` with shape ``(particles, N+1)``.
    """

    scheme: str
    fs: object
    field: object
    grid: object
    start: object
    states: np.ndarray
    logdet: np.ndarray
    seed: object = None

    def map_coefficients(self, k, t=None):
        nodes = self.grid.nodes
        t = nodes[k + 1] if t is None else t
        return coefficients(self.scheme, self.fs, self.grid.T, nodes[k], nodes[k + 1], t)

    def to_csv_rows(self, particle):
        d = self.states.shape[-1]
        header = ["node", "t"] + [f"x{i}" for i in range(d)] + ["logdet"]
        rows = [header]
        for k, t in enumerate(self.grid.nodes):
            rows.append([k, repr(float(t))] + [repr(float(v)) for v in self.states[particle, k]] + [repr(float(self.logdet[particle, k]))])
        return rows


def _advance(args):
    scheme, fs, field, grid, x0 = args
    nodes, T = grid.nodes, grid.T
    n, d = x0.shape
    states = np.empty((n, len(nodes), d))
    logdet = np.zeros((n, len(nodes)))
    states[:, 0] = x0
    x = x0
    for k in range(len(nodes) - 1):
        co = coefficients(scheme, fs, T, nodes[k], nodes[k + 1], nodes[k + 1])
        try:
            logdet[:, k + 1] = logdet[:, k] + _logdet(co, field, x)
            x = _apply(co, field, x)
        except Exception as exc:
            raise type(exc)(f"step {k} (t={nodes[k]:.6g}): {exc}") from exc
        states[:, k + 1] = x
    return states, logdet


def run_reverse(scheme, fs, field, grid, init, seed=None, start=None, jobs=1):
    """Run a sampler over ``grid``.

    ``init`` is either an ``(M, d)`` array or ``{"count": M}``; in the second
    case ``M`` points are drawn from ``start`` (default: the prior) with ``seed``.
    Particles are split into contiguous chunks across ``jobs`` processes; each
    particle's arithmetic does not depend on the split.
    """
    scheme = scheme_name(scheme)
    d = field.dim
    if start is None:
        start = prior(fs, grid.T, d)
    if isinstance(init, dict):
        unknown = set(init) - {"count"}
        if unknown:
            raise InputError(f"unknown keys in init spec: {sorted(unknown)}")
        x0 = start.sample(int(init["count"]), seed)
    else:
        x0 = np.atleast_2d(np.asarray(init, dtype=float))
    if jobs and jobs > 1 and len(x0) > 1:
        chunks = np.array_split(x0, min(jobs, len(x0)))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_advance, [(scheme, fs, field, grid, c) for c in chunks]))
        states = np.concatenate([p[0] for p in parts])
        logdet = np.concatenate([p[1] for p in parts])
    else:
        states, logdet = _advance((scheme, fs, field, grid, x0))
    return ReverseRun(scheme, fs, field, grid, start, states, logdet, seed)


# ---------------------------------------------------------------------------
# continuous reference


def reverse_drift(fs, field, T):
    """Drift of the simulated reverse ODE ``-(a y - (sigma^2/2) s(T - t, y))``."""
    a = fs.drift_rate

    def drift(t, y):
        return -a * y + 0.5 * fs.diffusion_sq(T - t) * field.score(T - t, y)

    return drift


def continuous_reference(fs, field, T, t_start, t_end, x, tol=1e-10, with_logdet=False):
    """Integrate the simulated reverse ODE with the adaptive 5(4) pair.

    With ``with_logdet`` the log-Jacobian ``int div(drift) dt`` is carried as an
    extra state and returned alongside the points.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    x = np.asarray(x, dtype=float)
    a = fs.drift_rate
    d = x.shape[-1]
    if not with_logdet:
        y, _ = dopri45(reverse_drift(fs, field, T), t_start, x, t_end, rtol=tol, atol=tol)
        return y
    drift = reverse_drift(fs, field, T)

    def aug(t, state):
        y = state[..., :d]
        div = -a * d + 0.5 * fs.diffusion_sq(T - t) * field.divergence(T - t, y)
        return np.concatenate([drift(t, y), div[..., None]], axis=-1)

    state0 = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    out, _ = dopri45(aug, t_start, state0, t_end, rtol=tol, atol=tol)
    return out[..., :d], out[..., d]


def start_law(kind, fs, T, cloud=None, d=None):
    """``"prior"`` for the reference Gaussian or ``"marginal"`` for ``q_T`` itself."""
    if kind == "prior":
        return prior(fs, T, d if d is not None else cloud.dim)
    if kind == "marginal":
        return MarginalLaw(cloud, fs, T)
    raise InputError(f"unknown start law {kind!r}")


def is_gaussian_start(start):
    return isinstance(start, GaussianPrior)
