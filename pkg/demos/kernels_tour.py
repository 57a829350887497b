"""Green and Poisson kernels of the square-root operator on the unit disk.

Builds a kernel set, compares the two evaluation routes at a few pairs and
shows how the surface-measure potential blows up towards the boundary.

    python demos/kernels_tour.py
"""

import numpy as np

from phigreen import bernstein as bn
from phigreen import kernels as kn
from phigreen.spectral_domain import make_domain

ks = kn.KernelSet(bn.stable(0.5), make_domain("disk", 400), 400)

x = np.array([[0.3, 0.1], [-0.5, 0.2], [0.0, -0.4]])
y = np.array([[-0.2, 0.4], [0.4, -0.3], [0.1, 0.5]])
spectral = kn.green_phi(ks, x, y, "spectral")
subord = kn.green_phi(ks, x, y, "subordination")
print("Green kernel at three pairs")
for a, b, g1, g2 in zip(x, y, spectral, subord):
    print(f"  {a} -> {b}: spectral {g1:.6f}  subordination {g2:.6f}")

print("\nPoisson integral of the surface measure along the ray towards (1, 0)")
for d in np.geomspace(0.3, 0.003, 6):
    v = kn.poisson_sigma(ks, np.array([[1 - d, 0.0]]))[0]
    print(f"  delta {d:.4f}: {v:10.4f}   times delta: {v * d:.4f}")
