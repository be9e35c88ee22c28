"""Hypothesis strategies shared by the test modules."""

import numpy as np
from hypothesis import strategies as st

from flowlab import AtomCloud


@st.composite
def clouds(draw, dims=(1, 2, 3), max_atoms=4, radius=2.0):
    d = draw(st.sampled_from(dims))
    n = draw(st.integers(1, max_atoms))
    coords = draw(st.lists(st.floats(-radius, radius, allow_nan=False), min_size=n * d, max_size=n * d))
    atoms = np.array(coords).reshape(n, d)
    norms = np.linalg.norm(atoms, axis=1, keepdims=True)
    atoms = np.where(norms > radius, atoms * radius / np.maximum(norms, 1e-300), atoms)
    raw = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    return AtomCloud(atoms, raw / raw.sum())


taus = st.floats(0.05, 4.0)
