"""Which test functions can tell a correlated Gaussian from its lagged copy?

Only functions with a cross term on the correlated pair see a gap; constants,
single-dimension functions and cross terms on independent pairs do not.

    python3 demos/correlated_gap.py
"""

from instadep.core import RngStream
from instadep.theorylab import corollary_suite

for rho in (0.9, -0.9, 0.0):
    out = corollary_suite(rho=rho, n_mc=200_000, rng=RngStream(0))
    print(f"rho = {rho:+.1f}")
    for name, row in out.items():
        print(f"  {name:17s} gap {row['estimate']:+.4f} +/- {row['std_err']:.4f}  (expected {row['target']:+.2f})")
