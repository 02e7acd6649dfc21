"""Simulate one confounded toy trial and compare every estimator.

Run with ``python3 demos/toy_simulation.py [seed] [m]``.
"""
import sys

from ecometric.analysis import ALL_METHODS, SHORT_METHODS, run_analysis
from ecometric.simulation import default_toy_config, generate


def main(seed=11, m=500):
    for confounded in (True, False):
        sim = generate(default_toy_config(confounded=confounded, m=m, seed=seed))
        res = run_analysis(sim.dataset)
        print(f"\nconfounded={confounded}  m={m}  seed={seed}  (true lambda = {sim.config.lam})")
        print(f"ICC {res.icc.icc:.3f}  n_bar {res.factors.n_bar:.1f}  V_n^2 {res.factors.v_n_sq:.2f}")
        for k in ALL_METHODS:
            print(f"  {SHORT_METHODS[k]:<22} {res.fits[k].lambda_hat:7.3f}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
