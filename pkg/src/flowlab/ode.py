"""Adaptive Dormand-Prince 5(4) integrator for batched states.

The state may have any shape; the error estimate is the largest scaled
component so every particle in a batch meets the tolerance.  Step control is
a PI controller (Gustafsson) with first-same-as-last reuse.
"""

import numpy as np

from .errors import ComputationError, StiffnessError

__all__ = ["dopri45"]

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B_LOW


def dopri45(fun, t0, y0, t1, rtol=1e-8, atol=1e-8, h0=None, max_steps=200_000, safety=0.9):
    """Integrate ``y' = fun(t, y)`` from ``t0`` to ``t1`` (either direction).

    Returns ``(y(t1), info)`` where ``info`` counts accepted and rejected steps.
    """
    y = np.array(y0, dtype=float, copy=True)
    t0, t1 = float(t0), float(t1)
    span = t1 - t0
    if span == 0.0:
        return y, {"accepted": 0, "rejected": 0}
    direction = np.sign(span)
    h_min = 1e-14 * max(abs(t0), abs(t1), 1.0)

    k1 = np.asarray(fun(t0, y), dtype=float)
    if h0 is None:
        scale = atol + rtol * np.abs(y)
        d0 = np.max(np.abs(y) / scale)
        d1 = np.max(np.abs(k1) / scale)
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(abs(h0), abs(span))
    t = t0
    err_prev = 1.0
    accepted = rejected = 0
    alpha, beta = 0.7 / 5, 0.4 / 5

    while direction * (t1 - t) > 0:
        if accepted + rejected >= max_steps:
            raise ComputationError(f"step budget exhausted at t={t:.6g}")
        if h < h_min:
            raise StiffnessError(f"step size underflow at t={t:.6g} (h={h:.3e})")
        last = h >= abs(t1 - t)
        if last:
            h = abs(t1 - t)
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            incr = sum(a * k for a, k in zip(_A[i], ks))
            ks.append(np.asarray(fun(t + _C[i] * hs, y + hs * incr), dtype=float))
        y_new = y + hs * sum(b * k for b, k in zip(_B, ks) if b != 0.0)
        err_vec = hs * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale)) if err_vec.size else 0.0
        if not np.isfinite(err):
            rejected += 1
            h *= 0.25
            continue
        if err <= 1.0:
            t = t1 if last else t + hs
            y = y_new
            k1 = ks[6]
            accepted += 1
            factor = safety * max(err, 1e-10) ** -alpha * err_prev**beta
            h *= min(5.0, max(0.2, factor))
            err_prev = max(err, 1e-4)
        else:
            rejected += 1
            h *= max(0.2, safety * err ** -(1 / 5))
    return y, {"accepted": accepted, "rejected": rejected}
