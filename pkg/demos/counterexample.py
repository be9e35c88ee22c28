"""Small score error, large TV error.

A score field that is uniformly within ``1/(2 pi n)`` of the standard normal
score still transports the normal to a law at TV distance about ``1/(2 pi)``
from it, whatever ``n`` is.  The sampler has no way to see an oscillation
that fine.

    python3 demos/counterexample.py
"""

import math

from flowlab.tv import counterexample_report, sine_tv_quadrature, sine_tv_series


def main():
    print("  n   sup|score error|   final TV   series      quadrature")
    for n in (4, 16, 64):
        rep = counterexample_report(n, 1.0, n_t=101, n_x=201, particles=9)
        print(f"{n:3d}   {rep['sup_score_error']:.3e}       {rep['tv_final']:.5f}    "
              f"{sine_tv_series(n):.8f}  {sine_tv_quadrature(n):.8f}")
    print(f"limit 1/(2 pi) = {1 / (2 * math.pi):.5f}")


if __name__ == "__main__":
    main()
