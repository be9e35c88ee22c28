"""Closed-form marginals of Gaussian-smoothed atom clouds.

The data law is a finite mixture of point masses ``sum_i w_i delta(y_i)``.
After the forward process it becomes ``X_t = f X_0 + g Z`` whose density,
score and score derivatives are all finite sums over the atoms.  Every
function here accepts a single point of shape ``(d,)`` or a batch of shape
``(..., d)`` and broadcasts over the leading axes.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DomainError, InputError

__all__ = [
    "AtomCloud",
    "MarginalScaling",
    "log_marginal_density",
    "marginal_density",
    "responsibilities",
    "score",
    "score_jacobian",
    "score_divergence",
    "grad_trace_hessian",
    "time_derivatives",
]


@dataclass(frozen=True)
class AtomCloud:
    """Finitely supported data distribution.

    ``radius`` is derived from the atoms (largest atom norm) and is the
    support bound used by every bound certificate.
    """

    atoms: np.ndarray
    weights: np.ndarray
    radius: float = field(init=False)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if atoms.ndim != 2 or atoms.shape[0] == 0 or atoms.shape[1] == 0:
            raise InputError("atoms must be a non-empty (n, d) array")
        if weights.shape != (atoms.shape[0],):
            raise InputError("need exactly one weight per atom")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InputError("weights must be nonnegative and sum to 1")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(weights))):
            raise InputError("atoms and weights must be finite")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "radius", float(np.max(np.linalg.norm(atoms, axis=1))))

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def size(self):
        return self.atoms.shape[0]

    def mean(self):
        return self.weights @ self.atoms

    def second_moment(self):
        """E||X_0||^2."""
        return float(self.weights @ np.sum(self.atoms**2, axis=1))

    def variance(self):
        """Total variance E||X_0 - E X_0||^2."""
        m = self.mean()
        return float(self.weights @ np.sum((self.atoms - m) ** 2, axis=1))

    @classmethod
    def single(cls, point):
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), np.ones(1))

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - {"atoms", "weights"}
        if unknown:
            raise InputError(f"unknown keys in atom cloud: {sorted(unknown)}")
        try:
            return cls(np.asarray(obj["atoms"], dtype=float), np.asarray(obj["weights"], dtype=float))
        except KeyError as exc:
            raise InputError(f"atom cloud is missing {exc}") from None

    def to_dict(self):
        return {"atoms": self.atoms.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class MarginalScaling:
    """Scalings of ``X_t = f X_0 + g Z`` at one time."""

    f: float
    g: float

    def __post_init__(self):
        if not (np.isfinite(self.f) and np.isfinite(self.g)):
            raise DomainError("scalings must be finite")
        if self.g <= 0:
            raise DomainError(f"noise scale must be positive, got g={self.g!r}")


def _prepare(cloud, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != cloud.dim:
        raise InputError(f"points must have trailing dimension {cloud.dim}, got shape {x.shape}")
    return x


def _logits(cloud, ms, x):
    # log w_i - |x - f y_i|^2 / (2 g^2), shape (..., n)
    diff = x[..., None, :] - ms.f * cloud.atoms
    with np.errstate(divide="ignore"):
        logw = np.log(cloud.weights)
    return logw - np.sum(diff**2, axis=-1) / (2.0 * ms.g**2)


def log_marginal_density(cloud, ms, x):
    x = _prepare(cloud, x)
    d = cloud.dim
    return logsumexp(_logits(cloud, ms, x), axis=-1) - 0.5 * d * np.log(2.0 * np.pi * ms.g**2)


def marginal_density(cloud, ms, x):
    """Density of ``f X_0 + g Z`` at ``x``."""
    return np.exp(log_marginal_density(cloud, ms, x))


def responsibilities(cloud, ms, x):
    """Posterior weights of the atoms given ``X_t = x``."""
    x = _prepare(cloud, x)
    return softmax(_logits(cloud, ms, x), axis=-1)


def _central_moments(cloud, ms, x):
    r = responsibilities(cloud, ms, x)
    m = r @ cloud.atoms
    u = cloud.atoms - m[..., None, :]
    return r, m, u


def score(cloud, ms, x):
    """Gradient of the log marginal density."""
    x = _prepare(cloud, x)
    r = responsibilities(cloud, ms, x)
    m = r @ cloud.atoms
    return -(x - ms.f * m) / ms.g**2


def score_jacobian(cloud, ms, x):
    """Hessian of the log marginal density, shape ``(..., d, d)``."""
    x = _prepare(cloud, x)
    r, _, u = _central_moments(cloud, ms, x)
    cov = np.einsum("...n,...ni,...nj->...ij", r, u, u)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eye = np.eye(cloud.dim)
    return -(eye - (ms.f**2 / ms.g**2) * cov) / ms.g**2


def score_divergence(cloud, ms, x):
    """Laplacian of the log marginal density."""
    x = _prepare(cloud, x)
    r, _, u = _central_moments(cloud, ms, x)
    spread = np.sum(r * np.sum(u**2, axis=-1), axis=-1)
    return -cloud.dim / ms.g**2 + (ms.f**2 / ms.g**4) * spread


def grad_trace_hessian(cloud, ms, x):
    """Gradient of the Laplacian of the log marginal density.

    Differentiating the responsibilities gives ``grad r_i = (f/g^2) r_i (y_i - m)``,
    so the gradient of the responsibility spread is the third central moment
    ``E_r[|y - m|^2 (y - m)]`` scaled by ``f^3/g^6``.  Expanded about the origin
    this is ``E|y|^2 y - E|y|^2 E y - 2 Cov(y) E y``; the centred form is used
    because it avoids cancellation.
    """
    x = _prepare(cloud, x)
    r, _, u = _central_moments(cloud, ms, x)
    third = np.einsum("...n,...n,...ni->...i", r, np.sum(u**2, axis=-1), u)
    return (ms.f**3 / ms.g**6) * third


def time_derivatives(cloud, fs, t, x):
    """Time derivatives of the score and of its divergence at forward time ``t``.

    Central differences in ``t`` with ``h = 1e-4 max(t, 1e-3)`` followed by one
    Richardson extrapolation against ``h/2``.
    """
    x = _prepare(cloud, x)
    t = float(t)
    h = 1e-4 * max(t, 1e-3)
    if t - h <= 0.0:
        raise DomainError(f"time {t!r} is too close to the origin for differencing")

    def central(step):
        lo, hi = fs.scaling(t - step), fs.scaling(t + step)
        ds = (score(cloud, hi, x) - score(cloud, lo, x)) / (2 * step)
        dtr = (score_divergence(cloud, hi, x) - score_divergence(cloud, lo, x)) / (2 * step)
        return ds, dtr

    ds1, dtr1 = central(h)
    ds2, dtr2 = central(h / 2)
    return (4 * ds2 - ds1) / 3, (4 * dtr2 - dtr1) / 3
