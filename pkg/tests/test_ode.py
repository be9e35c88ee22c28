import numpy as np
import pytest

from flowlab import ComputationError, StiffnessError
from flowlab.ode import dopri45


def test_exponential_growth():
    y, info = dopri45(lambda t, y: y, 0.0, np.array([1.0, 2.0]), 2.0, rtol=1e-10, atol=1e-12)
    assert np.allclose(y, np.exp(2.0) * np.array([1.0, 2.0]), rtol=1e-8)
    assert info["accepted"] > 0


def test_harmonic_oscillator_backwards():
    rhs = lambda t, y: np.stack([y[..., 1], -y[..., 0]], axis=-1)
    y, _ = dopri45(rhs, 3.0, np.array([[np.cos(3.0), -np.sin(3.0)]]), 0.0, rtol=1e-11, atol=1e-11)
    assert np.allclose(y, [[1.0, 0.0]], atol=1e-8)


def test_error_tracks_tolerance():
    errs = []
    for tol in (1e-5, 1e-8):
        y, _ = dopri45(lambda t, y: -2 * t * y, 0.0, np.array([1.0]), 3.0, rtol=tol, atol=tol)
        errs.append(abs(y[0] - np.exp(-9.0)))
    assert errs[1] < errs[0] and errs[1] < 1e-7


def test_zero_span_is_identity():
    y0 = np.array([1.0, 2.0])
    y, info = dopri45(lambda t, y: y, 1.0, y0, 1.0)
    assert np.array_equal(y, y0) and info["accepted"] == 0


def test_blow_up_is_reported():
    with pytest.raises((StiffnessError, ComputationError)):
        dopri45(lambda t, y: y**2, 0.0, np.array([1.0]), 2.0, max_steps=5000)
