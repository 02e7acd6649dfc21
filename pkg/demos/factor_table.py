"""Print the disattenuation factors over an ICC by site-size grid.

Also shows how the corrections shrink toward 1 as sites grow.
"""
import numpy as np

from ecometric.attenuation import zeta_factors
from ecometric.cli import format_table, table1

print(format_table(table1(), ["icc", "n_bar", "zeta1", "zeta2", "zeta2a", "zeta3"]))

print("\nzeta1 at icc=0.05 as n_bar grows")
for n in (10, 50, 200, 1000, 5000):
    print(f"  n_bar={n:<5d} {zeta_factors(0.05, n, 0.6, 0.02, 1.0)[0]:.4f}")

print("\nzeta3 starts at zeta1 and ends near zeta2a as tau_q^2 grows (icc=0.05, n_bar=20)")
for tau in np.logspace(-4, 2, 7):
    z1, _, z2a, z3 = zeta_factors(0.05, 20, 0.6, tau, 1.0)
    print(f"  tau={tau:<8.4g} zeta3={z3:.4f}  (zeta1 {z1:.4f}, zeta2a {z2a:.4f})")
