"""Cross-check a Green potential against simulated paths.

Paths of Brownian motion killed on leaving the disk are run with a
square-root stable clock; the occupation integral of a Gaussian bump is
compared with the spectral value.  A small path count keeps this quick.

    python demos/monte_carlo_check.py [paths]
"""

import sys

import numpy as np

from phigreen import bernstein as bn
from phigreen import mc_oracle as mc
from phigreen.kernels import KernelSet
from phigreen.spectral_domain import make_domain

paths = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
ks = KernelSet(bn.stable(0.5), make_domain("disk", 400), 400)


def bump(X):
    return np.exp(-(X**2).sum(axis=1) / (2 * 0.15**2))


cfg = mc.PathConfig(paths=paths, seed=11)
for x in [(0.3, 0.0), (0.0, 0.5)]:
    ref = mc.spectral_green_potential(ks, bump, x)
    est = mc.estimate_green_potential(cfg, ks, x, bump, ref)
    print(f"x = {x}: simulated {est.estimate:.5f} +- {est.se:.5f}, spectral {ref:.5f}, z = {est.z:+.2f}")
