"""Forward noising processes, priors, time schedules and forward-side bounds."""

import json
import math
from dataclasses import dataclass

import numpy as np

from .analytic import MarginalScaling, log_marginal_density, score
from .errors import DomainError, InputError

__all__ = [
    "ForwardSpec",
    "VP",
    "VE",
    "forward_spec",
    "GaussianPrior",
    "MarginalLaw",
    "TimeGrid",
    "GridCheck",
    "build_grid",
    "grid_with_steps",
    "validate_grid",
    "prior",
    "prior_tv_bound",
    "moment_bound",
    "tweedie_second_moment_bound",
    "sample_marginal",
    "make_rng",
]


def make_rng(seed, *stream):
    """Counter-based generator (Philox) keyed by ``seed`` and an optional stream path.

    Every derived stream depends only on ``(seed, *stream)``, so per-particle or
    per-index streams do not depend on how work is split across workers.
    """
    if seed is None:
        raise InputError("an explicit seed is required")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class ForwardSpec:
    """Linear forward SDE ``dX = a X dt + sigma dW``.

    VP: ``a = -1``, ``sigma = sqrt(2)``; VE: ``a = 0``, ``sigma = 1``.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("VP", "VE"):
            raise InputError(f"forward kind must be 'VP' or 'VE', got {self.kind!r}")

    @property
    def drift_rate(self):
        return -1.0 if self.kind == "VP" else 0.0

    def drift(self, t, x):
        return self.drift_rate * np.asarray(x, dtype=float)

    def diffusion(self, t):
        return math.sqrt(2.0) if self.kind == "VP" else 1.0

    def diffusion_sq(self, t):
        return 2.0 if self.kind == "VP" else 1.0

    def scaling(self, t):
        t = float(t)
        if not t > 0.0:
            raise DomainError(f"marginal scaling needs t > 0, got {t!r}")
        if self.kind == "VP":
            return MarginalScaling(math.exp(-t), math.sqrt(-math.expm1(-2.0 * t)))
        return MarginalScaling(1.0, math.sqrt(t))

    def scaling_rates(self, t):
        """``(df/dt, dg/dt)`` at forward time ``t``."""
        ms = self.scaling(t)
        if self.kind == "VP":
            return -ms.f, math.exp(-2.0 * t) / ms.g
        return 0.0, 0.5 / ms.g

    def noise_floor(self, t):
        """``min{t, 1}`` for VP and ``t`` for VE: the scale entering the order-only bounds."""
        return min(t, 1.0) if self.kind == "VP" else t


VP = ForwardSpec("VP")
VE = ForwardSpec("VE")


def forward_spec(kind):
    return ForwardSpec(kind.upper())


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic Gaussian ``N(0, variance I_d)``."""

    dim: int
    variance: float

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.sum(x**2, axis=-1) / self.variance - 0.5 * self.dim * math.log(2 * math.pi * self.variance)

    def density(self, x):
        return np.exp(self.log_density(x))

    def sample(self, count, seed):
        return math.sqrt(self.variance) * make_rng(seed).standard_normal((count, self.dim))


@dataclass(frozen=True)
class MarginalLaw:
    """The smoothed data law ``q_tau`` of an atom cloud, usable as a start law."""

    cloud: object
    fs: ForwardSpec
    tau: float

    @property
    def dim(self):
        return self.cloud.dim

    def log_density(self, x):
        return log_marginal_density(self.cloud, self.fs.scaling(self.tau), x)

    def density(self, x):
        return np.exp(self.log_density(x))

    def sample(self, count, seed):
        return sample_marginal(self.cloud, self.fs, self.tau, count, seed)


def prior(fs, T, d):
    """Reference law the sampler starts from: ``N(0, I)`` for VP, ``N(0, T I)`` for VE."""
    return GaussianPrior(int(d), 1.0 if fs.kind == "VP" else float(T))


# ---------------------------------------------------------------------------
# time schedule


@dataclass(frozen=True)
class TimeGrid:
    T: float
    delta: float
    eta: float
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def steps(self):
        return np.diff(self.nodes)

    @property
    def N(self):
        return len(self.nodes) - 1

    def to_dict(self):
        return {"T": self.T, "delta": self.delta, "eta": self.eta, "nodes": self.nodes.tolist()}

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - {"T", "delta", "eta", "nodes"}
        if unknown:
            raise InputError(f"unknown keys in time grid: {sorted(unknown)}")
        return cls(float(obj["T"]), float(obj["delta"]), float(obj["eta"]), obj["nodes"])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GridCheck:
    ok: bool
    index: int = -1
    reason: str = ""

    def __bool__(self):
        return self.ok


def _check_params(T, delta, eta):
    if not T > 1:
        raise InputError(f"horizon must exceed 1, got T={T!r}")
    if not 0 < delta < 1:
        raise InputError(f"cutoff must lie in (0, 1), got delta={delta!r}")
    if not eta > 0:
        raise InputError(f"eta must be positive, got {eta!r}")


def build_grid(T, delta, eta):
    """Two-stage schedule: uniform steps of at most ``eta`` on ``[0, T-1]``, then
    steps shrinking geometrically by ``1/(1+eta)`` towards ``T - delta``.

    The uniform stage's last step is shortened to land on ``T-1``; the geometric
    stage is laid out backwards from ``T - delta`` so the final node is exact.
    """
    T, delta, eta = float(T), float(delta), float(eta)
    _check_params(T, delta, eta)
    span = T - 1.0
    n_uniform = max(1, math.ceil(span / eta - 1e-12))
    uniform = [k * eta for k in range(n_uniform)] + [span]

    # distances to T, growing by (1+eta) until reaching 1
    gaps = [delta]
    while gaps[-1] * (1.0 + eta) < 1.0:
        gaps.append(gaps[-1] * (1.0 + eta))
    tail = [T - gap for gap in reversed(gaps)]
    nodes = np.array(uniform + tail)
    nodes[-1] = T - delta
    return TimeGrid(T, delta, eta, nodes)


def grid_with_steps(T, delta, steps):
    """Schedule with ``steps`` steps when achievable, otherwise the nearest count above.

    The step count is a non-increasing step function of ``eta``.  At the edge of
    each level a new step appears with near-zero length, so ``eta`` is taken
    from the geometric middle of the level rather than its edge.
    """
    if steps < 2:
        raise InputError("need at least two steps")

    def edge(count):
        # log of the largest eta whose grid has at least ``count`` steps
        lo, hi = math.log(1e-6), math.log(T)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if build_grid(T, delta, math.exp(mid)).N >= count:
                lo = mid
            else:
                hi = mid
        return lo

    upper = edge(steps)
    count = build_grid(T, delta, math.exp(upper)).N
    lower = edge(count + 1)
    return build_grid(T, delta, math.exp(0.5 * (lower + upper)))


def validate_grid(grid, eta=None, tol=1e-12):
    """Check every step against ``eta_k <= eta min{1, T - t_{k+1}}``."""
    eta = grid.eta if eta is None else float(eta)
    nodes = np.asarray(grid.nodes, dtype=float)
    if len(nodes) == 0 or abs(nodes[0]) > tol:
        return GridCheck(False, 0, "first node must be 0")
    if abs(nodes[-1] - (grid.T - grid.delta)) > tol:
        return GridCheck(False, len(nodes) - 1, "last node must equal T - delta")
    steps = np.diff(nodes)
    if np.any(steps <= 0):
        return GridCheck(False, int(np.argmax(steps <= 0)), "nodes must be strictly increasing")
    limit = eta * np.minimum(1.0, grid.T - nodes[1:])
    bad = steps > limit + tol
    if np.any(bad):
        return GridCheck(False, int(np.argmax(bad)), "step exceeds eta min{1, T - t_{k+1}}")
    return GridCheck(True)


# ---------------------------------------------------------------------------
# bounds tied to the forward process


def prior_tv_bound(fs, cloud, T, d=None):
    """Upper bound on TV(q_T, prior).

    VE: Pinsker on ``KL = E|X_0|^2 / (2T)``, exact.  VP: ``sqrt(d/2) e^{-T}``,
    an order-only surrogate (the constant is not certified).
    """
    d = cloud.dim if d is None else int(d)
    if fs.kind == "VE":
        return math.sqrt(cloud.second_moment() / (4.0 * T))
    return math.sqrt(d / 2.0) * math.exp(-T)


def prior_tv_bound_is_exact(fs):
    return fs.kind == "VE"


def moment_bound(fs, cloud, tau, order):
    """Bound functional for ``E|Y|^order`` where ``Y ~ q_tau`` (``tau = T - t``).

    Uses ``m = min{tau, 1}`` for VP and ``m = tau`` for VE:
    order 1 ``R + sqrt(m d)``, order 2 ``R^2 + m d``, order 3
    ``R^3 + (m d)^{3/2}``, order 4 ``R^4 + (m d)^2``.  Only VE order 2 carries an
    exact constant; the rest are order-only (constant 1).
    """
    if order not in (1, 2, 3, 4):
        raise InputError(f"moment order must be 1..4, got {order!r}")
    if not tau > 0:
        raise DomainError("tau must be positive")
    R, d = cloud.radius, cloud.dim
    md = fs.noise_floor(tau) * d
    if order == 1:
        return R + math.sqrt(md)
    if order == 2:
        return R**2 + md
    if order == 3:
        return R**3 + md**1.5
    return R**4 + md**2


def moment_bound_is_exact(fs, order):
    return fs.kind == "VE" and order == 2


def tweedie_second_moment_bound(fs, t, d):
    """Bound on ``E|grad log q_t(X_t)|^2``: ``d/(1 - e^{-2t})`` (VP) or ``d/t`` (VE)."""
    if not t > 0:
        raise InputError("t must be positive")
    return d * fs.scaling(t).g ** -2


def sample_marginal(cloud, fs, t, count, seed):
    """Draw ``count`` points from ``q_t``; reproducible from ``seed``."""
    count = int(count)
    if count == 0:
        return np.empty((0, cloud.dim))
    ms = fs.scaling(t)
    rng = make_rng(seed)
    idx = rng.choice(cloud.size, size=count, p=cloud.weights)
    return ms.f * cloud.atoms[idx] + ms.g * rng.standard_normal((count, cloud.dim))


def exact_score_second_moment_mc(cloud, fs, t, count, seed):
    """Monte Carlo mean and standard error of ``|grad log q_t(X_t)|^2``."""
    x = sample_marginal(cloud, fs, t, count, seed)
    sq = np.sum(score(cloud, fs.scaling(t), x) ** 2, axis=-1)
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(count))

