"""Numerical certificates for the analytic score bounds.

Draws probe points from the forward marginals and a surrounding box and
reports the largest measured/bound ratio for each bound.  Ratios at most 1
mean an exact-constant bound held at every probe; bounds known only up to a
constant are compared against a cap of 10 instead.

    python3 demos/certificates.py
"""

import numpy as np

from flowlab import VE, VP, AtomCloud
from flowlab.operators import (
    certify_score_bounds,
    gaussian_ratio_certificate,
    moment_certificates,
    pinsker_certificate,
    probe_points,
    tweedie_certificate,
)


def show(cert):
    status = "ok " if cert.passed else "BAD"
    limit = "exact" if cert.exact_constant else f"cap {cert.cap:g}"
    print(f"  {status} {cert.bound_name:24s} probes={cert.probes:6d}  max ratio={cert.max_ratio:.4f}  ({limit})")


def main():
    rng = np.random.default_rng(7)
    atoms = rng.uniform(-1, 1, size=(5, 2))
    cloud = AtomCloud(atoms, np.full(5, 0.2))
    taus = [0.02, 0.1, 0.5, 2.0]
    for fs in (VP, VE):
        print(fs.kind)
        pts = probe_points(cloud, fs, taus, 2000, seed=1)
        for cert in certify_score_bounds(cloud, fs, taus, pts):
            show(cert)
        show(tweedie_certificate(cloud, fs, taus, 50_000, seed=2))
        for cert in moment_certificates(cloud, fs, taus, samples=50_000, seed=3):
            show(cert)
    print("Gaussian smoothing and VE prior")
    show(gaussian_ratio_certificate(cloud, 0.1, 0.4, pts[0]))
    show(pinsker_certificate(AtomCloud(atoms[:, :1], np.full(5, 0.2)), [2.0, 8.0, 32.0]))


if __name__ == "__main__":
    main()
