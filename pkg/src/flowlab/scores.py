"""Score fields consumed by the samplers.

A field is evaluated at *forward* time ``tau`` (the reverse process at time
``t`` queries ``tau = T - t``).  Points are ``(..., d)`` arrays; Jacobians are
``(..., d, d)``.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import analytic
from .analytic import AtomCloud
from .errors import ComputationError, InputError
from .forward import ForwardSpec, make_rng, sample_marginal

__all__ = [
    "ScoreField",
    "ExactField",
    "ZeroField",
    "PerturbedField",
    "CounterexampleField",
    "exact_field",
    "zero_field",
    "perturbed_field",
    "sine_counterexample_field",
    "field_from_dict",
    "AssumptionReport",
    "measure_assumptions",
]


class ScoreField:
    """Interface: ``score``, ``jacobian`` and ``divergence`` at ``(tau, x)``."""

    dim = None
    tag = "abstract"

    def score(self, tau, x):
        raise NotImplementedError

    def jacobian(self, tau, x):
        raise NotImplementedError

    def divergence(self, tau, x):
        return np.trace(self.jacobian(tau, x), axis1=-2, axis2=-1)

    def params(self):
        return {}

    def to_dict(self):
        return {"variant": self.tag, **self.params()}


@dataclass(frozen=True)
class ExactField(ScoreField):
    """The true score of the smoothed atom cloud."""

    cloud: AtomCloud
    fs: ForwardSpec
    tag = "exact"

    @property
    def dim(self):
        return self.cloud.dim

    def score(self, tau, x):
        return analytic.score(self.cloud, self.fs.scaling(tau), x)

    def jacobian(self, tau, x):
        return analytic.score_jacobian(self.cloud, self.fs.scaling(tau), x)

    def divergence(self, tau, x):
        return analytic.score_divergence(self.cloud, self.fs.scaling(tau), x)


@dataclass(frozen=True)
class ZeroField(ScoreField):
    dim: int = 1
    tag = "zero"

    def score(self, tau, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian(self, tau, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (x.shape[-1],))

    def divergence(self, tau, x):
        return np.zeros(np.asarray(x).shape[:-1])

    def params(self):
        return {"dim": self.dim}


@dataclass(frozen=True)
class PerturbedField(ScoreField):
    """``base + amplitude * sin(wavenumber * x)`` applied to each coordinate."""

    base: ScoreField
    amplitude: float
    wavenumber: int
    tag = "perturbed"

    def __post_init__(self):
        if self.amplitude < 0:
            raise InputError("amplitude must be nonnegative")
        if int(self.wavenumber) != self.wavenumber or self.wavenumber < 1:
            raise InputError("wavenumber must be a positive integer")

    @property
    def dim(self):
        return self.base.dim

    def score(self, tau, x):
        x = np.asarray(x, dtype=float)
        return self.base.score(tau, x) + self.amplitude * np.sin(self.wavenumber * x)

    def jacobian(self, tau, x):
        x = np.asarray(x, dtype=float)
        bump = self.amplitude * self.wavenumber * np.cos(self.wavenumber * x)
        return self.base.jacobian(tau, x) + bump[..., None] * np.eye(x.shape[-1])

    def divergence(self, tau, x):
        x = np.asarray(x, dtype=float)
        bump = self.amplitude * self.wavenumber * np.cos(self.wavenumber * x)
        return self.base.divergence(tau, x) + bump.sum(axis=-1)

    def params(self):
        return {"amplitude": self.amplitude, "wavenumber": self.wavenumber, "base": self.base.to_dict()}


def _std_normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class CounterexampleField(ScoreField):
    """Smooth field that is uniformly close to the standard-normal score ``-x``
    yet transports ``N(0, 1)`` to ``phi(x) (1 + sin(2 n pi x) / 2)``.

    With ``t = T - tau`` the reverse time, the target path is
    ``qhat(t, x) = phi(x) (1 + t/(2T) sin(2 n pi x))`` and the field is
    ``tail(x) / qhat - x`` where ``tail(x) = (1/2T) int_x^inf phi(y) sin(2 n pi y) dy``.
    The flux ``(field + x) qhat = tail`` does not depend on time, which is what
    makes ``qhat`` solve the continuity equation.
    """

    n: int
    T: float
    _cache: dict = field(default_factory=dict, compare=False, repr=False)
    tag = "counterexample"
    dim = 1

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise InputError("n must be a positive integer")
        if not self.T > 0:
            raise InputError("T must be positive")

    def __getstate__(self):
        return {"n": self.n, "T": self.T}

    def __setstate__(self, state):
        object.__setattr__(self, "n", state["n"])
        object.__setattr__(self, "T", state["T"])
        object.__setattr__(self, "_cache", {})

    @property
    def omega(self):
        return 2.0 * math.pi * self.n

    def _tail_one(self, x):
        # the integrand is odd, so the tail integral is even in x
        a = abs(float(x))
        hit = self._cache.get(a)
        if hit is not None:
            return hit
        if a > 38.0:
            value = 0.0
        else:
            value, err = integrate.quad(
                _std_normal_pdf, a, a + 12.0, weight="sin", wvar=self.omega,
                epsabs=1e-13, epsrel=0.0, limit=400,
            )
            if not (np.isfinite(value) and err <= 1e-12):
                raise ComputationError(f"tail quadrature failed at x={x!r} (error estimate {err:.2e})")
        value /= 2.0 * self.T
        if len(self._cache) < 2_000_000:
            self._cache[a] = value
        return value

    def tail(self, x):
        """``(1/2T) int_x^inf phi(y) sin(2 n pi y) dy`` by oscillatory quadrature."""
        x = np.asarray(x, dtype=float)
        flat = np.array([self._tail_one(v) for v in x.ravel()])
        return flat.reshape(x.shape)

    def tail_derivative(self, x):
        return -_std_normal_pdf(x) * np.sin(self.omega * x) / (2.0 * self.T)

    def _weight(self, tau):
        tau = float(tau)
        if not -1e-12 <= tau <= self.T + 1e-12:
            raise InputError(f"tau must lie in [0, T], got {tau!r}")
        return (self.T - tau) / (2.0 * self.T)

    def path_density(self, tau, x):
        """``qhat`` at reverse time ``T - tau``."""
        x = np.asarray(x, dtype=float)
        return _std_normal_pdf(x) * (1.0 + self._weight(tau) * np.sin(self.omega * x))

    def path_density_dx(self, tau, x):
        x = np.asarray(x, dtype=float)
        c = self._weight(tau)
        s, co = np.sin(self.omega * x), np.cos(self.omega * x)
        return _std_normal_pdf(x) * (-x * (1.0 + c * s) + c * self.omega * co)

    def score(self, tau, x):
        x = np.asarray(x, dtype=float)
        return self.tail(x) / self.path_density(tau, x) - x

    def jacobian(self, tau, x):
        x = np.asarray(x, dtype=float)
        q = self.path_density(tau, x)
        dq = self.path_density_dx(tau, x)
        ds = (self.tail_derivative(x) * q - self.tail(x) * dq) / q**2 - 1.0
        return ds[..., None]

    def divergence(self, tau, x):
        return self.jacobian(tau, x)[..., 0, 0]

    def params(self):
        return {"n": self.n, "T": self.T}


def exact_field(cloud, fs):
    return ExactField(cloud, fs)


def zero_field(dim=1):
    return ZeroField(dim)


def perturbed_field(base, amplitude, wavenumber):
    return PerturbedField(base, float(amplitude), int(wavenumber))


def sine_counterexample_field(n, T):
    return CounterexampleField(int(n), float(T))


def field_from_dict(spec, cloud, fs):
    """Build a field from its JSON description."""
    spec = dict(spec)
    variant = spec.pop("variant", "exact")
    if variant == "exact":
        if spec:
            raise InputError(f"unknown keys for exact field: {sorted(spec)}")
        return exact_field(cloud, fs)
    if variant == "zero":
        return zero_field(cloud.dim if cloud is not None else spec.get("dim", 1))
    if variant == "perturbed":
        base = field_from_dict(spec.pop("base", {"variant": "exact"}), cloud, fs)
        amp, wav = spec.pop("amplitude"), spec.pop("wavenumber")
        if spec:
            raise InputError(f"unknown keys for perturbed field: {sorted(spec)}")
        return perturbed_field(base, amp, wav)
    if variant == "counterexample":
        return sine_counterexample_field(spec["n"], spec["T"])
    raise InputError(f"unknown field variant {variant!r}")


# ---------------------------------------------------------------------------
# assumption probes


@dataclass(frozen=True)
class AssumptionReport:
    eps_score: float
    eps_score_stderr: float
    eps_div: float
    lipschitz_L: float
    bound_c: float

    def as_dict(self):
        return {
            "eps_score": self.eps_score,
            "eps_score_stderr": self.eps_score_stderr,
            "eps_div": self.eps_div,
            "lipschitz_L": self.lipschitz_L,
            "bound_c": self.bound_c,
        }


def _lattice(dim, half_width):
    per_axis = {1: 801, 2: 61, 3: 17}.get(dim, 9)
    axis = np.linspace(-half_width, half_width, per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack(mesh, axis=-1), axis[1] - axis[0]


def lipschitz_probe(field, tau, half_width):
    """Largest of the neighbour difference quotients on a lattice and the
    spectral norm of the field Jacobian on the same lattice."""
    pts, _ = _lattice(field.dim, half_width)
    s = field.score(tau, pts)
    best = 0.0
    for axis in range(field.dim):
        ds = np.diff(s, axis=axis)
        dx = np.diff(pts, axis=axis)
        ratio = np.linalg.norm(ds, axis=-1) / np.linalg.norm(dx, axis=-1)
        best = max(best, float(ratio.max()))
    jac = field.jacobian(tau, pts.reshape(-1, field.dim))
    spec = np.linalg.norm(jac, ord=2, axis=(-2, -1))
    return max(best, float(spec.max()))


def _one_index(args):
    field, exact, cloud, fs, tau, samples, seed, index = args
    y = sample_marginal(cloud, fs, tau, samples, seed if index is None else _index_seed(seed, index))
    diff = field.score(tau, y) - exact.score(tau, y)
    sq = np.sum(diff**2, axis=-1)
    delta = field.jacobian(tau, y) - exact.jacobian(tau, y)
    tr_sq = np.einsum("...ij,...ji->...", delta, delta)
    return float(sq.mean()), float(sq.var(ddof=1) / samples) if samples > 1 else 0.0, float(tr_sq.mean())


def _index_seed(seed, index):
    return int(make_rng(seed, index).integers(0, 2**62))


def measure_assumptions(field, exact, cloud, fs, grid, samples, seed, jobs=1):
    """Probe the discrete estimation-error assumptions along ``grid``.

    ``eps_score^2 = sum_k eta_k E|s - grad log q|^2`` and
    ``eps_div = sum_k eta_k sqrt(E trace(D D))`` with ``D`` the Jacobian gap,
    expectations by Monte Carlo under ``q_{T - t_k}`` with per-index seeds.
    """
    if samples < 1:
        raise InputError("samples must be positive")
    T = grid.T
    taus = T - grid.nodes[:-1]
    etas = grid.steps
    work = [(field, exact, cloud, fs, float(tau), int(samples), seed, k) for k, tau in enumerate(taus)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_one_index, work))
    else:
        rows = [_one_index(w) for w in work]
    mean_sq = np.array([r[0] for r in rows])
    var_sq = np.array([r[1] for r in rows])
    tr_sq = np.array([r[2] for r in rows])
    eps_score_sq = float(etas @ mean_sq)
    eps_score = math.sqrt(eps_score_sq)
    stderr_sq = math.sqrt(float(etas**2 @ var_sq))
    eps_score_err = stderr_sq / (2 * eps_score) if eps_score > 0 else math.sqrt(stderr_sq)
    eps_div = float(etas @ np.sqrt(tr_sq))

    L, c = 0.0, 0.0
    for tau in taus:
        ms = fs.scaling(tau)
        half = cloud.radius * ms.f + 5.0 * ms.g + 1.0
        L = max(L, lipschitz_probe(field, tau, half))
        c = max(c, float(np.linalg.norm(field.score(tau, np.zeros(field.dim)))))
    return AssumptionReport(eps_score, eps_score_err, eps_div, L, c)
