"""First-order convergence of two deterministic samplers.

Starts each sampler from the exact forward marginal at the horizon, so the only
error left at the end is the discretization error.  The output density is
obtained by inverting every step, and its TV distance to the target is
computed by quadrature.

    python3 demos/convergence.py
"""

import numpy as np

from flowlab import VE, VP, AtomCloud, ExactField, MarginalLaw, grid_with_steps
from flowlab.experiments import fit_order
from flowlab.tv import _tv_from_values, law_window, pushforward_log_density


def tv_after(scheme, fs, cloud, T, delta, N):
    grid = grid_with_steps(T, delta, N)
    target = MarginalLaw(cloud, fs, grid.delta)
    lo, hi = law_window(target, width=12.0)
    x = np.linspace(lo, hi, 8001)
    logp = pushforward_log_density(scheme, fs, ExactField(cloud, fs), grid, MarginalLaw(cloud, fs, T), grid.N,
                                   x[:, None])
    return grid.N, _tv_from_values(x, np.exp(logp), target.density(x[:, None]))


def main():
    cloud = AtomCloud(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    for scheme, fs, T in (("ei", VP, 6.0), ("ddim", VE, 16.0)):
        pairs = []
        print(f"{fs.kind} + {scheme}")
        for N in (32, 64, 128, 256):
            N, tv = tv_after(scheme, fs, cloud, T, 0.01, N)
            pairs.append((N, tv))
            print(f"  N={N:4d}  TV={tv:.3e}")
        fit = fit_order(pairs)
        print(f"  fitted order {fit.slope:+.3f} +/- {fit.half_width:.3f}")


if __name__ == "__main__":
    main()
