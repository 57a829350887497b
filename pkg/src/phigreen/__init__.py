"""Green functions, Poisson kernels and semilinear boundary problems for subordinate killed Brownian motion."""

__version__ = "0.1.0"
