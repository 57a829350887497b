"""Heat, Green, Poisson, jump and killing kernels of the subordinate killed process.

Two evaluation routes are provided for the Green kernel:

* ``spectral``: a smoothly filtered eigenfunction sum over an extended mode
  set (``point_factor * N`` modes).  The filter is identically one on the
  low modes, so applying the kernel to any of the first ``N`` eigenfunctions
  is exact, and it removes the Gibbs ringing of a sharp cut-off.
* ``subordination``: the time integral of the Dirichlet heat kernel against
  the potential density.  For ``t >= t0`` the heat kernel is a spectral sum,
  for ``t < t0`` the free Gaussian with image corrections (exact method of
  images on boxes, Kelvin inversion on the disk).

Quantities driven by the constant function (killing function, Poisson
integral of the surface measure) use a separate, much larger set of
nonzero-mean modes together with half-line asymptotics for tiny times.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc, exp1, gamma, gammaincc, jv

from . import bernstein as bn
from .spectral_domain import (
    Disk,
    DomainGeometry,
    GridMask,
    Interval,
    Rectangle,
    _DiskModes,
    _IntervalModes,
    _RectangleModes,
    build_field_operator,
    build_spectrum,
    mean_spectrum,
)

__all__ = [
    "DiagonalError",
    "FineQuadrature",
    "Synthesizer",
    "KernelSet",
    "RatioReport",
    "apply_operator",
    "dump_kernel_csv",
    "green_classic",
    "green_phi",
    "heat_kernel",
    "jump_kernel",
    "killing_function",
    "poisson_classic",
    "poisson_phi",
    "poisson_sigma",
    "stratified_sample",
    "verify_factorization",
    "verify_green_poisson_identity",
    "verify_killing_identity",
    "verify_sharp_bounds",
]

_CHUNK = 256


class DiagonalError(ValueError):
    """A kernel was evaluated on the diagonal, where it is infinite."""


# ------------------------------------------------------------------ helpers


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        f0 = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        f1 = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return f0 / (f0 + f1)


def _upper_gamma(b, x):
    """Non-normalised upper incomplete gamma for b > -1."""
    x = np.asarray(x, dtype=float)
    if b > 0:
        return gammaincc(b, x) * gamma(b)
    if b == 0:
        return exp1(x)
    return (_upper_gamma(b + 1.0, x) - x**b * np.exp(-x)) / b


def _log_panels(t_lo, t_hi, per_decade=8, order=12):
    """Gauss-Legendre nodes and weights on [t_lo, t_hi], panels aligned in log10."""
    x, w = np.polynomial.legendre.leggauss(order)
    k0 = math.floor(math.log10(t_lo) * per_decade)
    edges = [t_lo]
    k = k0 + 1
    while 10 ** (k / per_decade) < t_hi:
        edges.append(10 ** (k / per_decade))
        k += 1
    edges.append(t_hi)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        la, lb = math.log(a), math.log(b)
        s = la + (lb - la) * (x + 1) / 2
        nodes.append(np.exp(s))
        weights.append(w * (lb - la) / 2 * np.exp(s))
    return np.concatenate(nodes), np.concatenate(weights)


def _points(geom, p):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1 and (geom.dim > 1 or p.size == 1)
    if p.ndim == 0:
        single = True
    return geom._as_points(np.atleast_1d(p)), single


def _density(phi, kind, t):
    """Potential density ('u') or Levy density ('mu') on an array of times."""
    if kind == "u":
        return np.asarray(bn.potential_density(phi, t), dtype=float)
    return np.asarray(bn.levy_density(phi, t), dtype=float)


@lru_cache(maxsize=64)
def _large_weights_cached(phi, kind, lam_bytes, t0, t_end):
    lam = np.frombuffer(lam_bytes)
    k, p = phi.kind, phi.params
    x = lam * t0
    if kind == "u" and k == "stable":
        return lam ** (-p[0]) * gammaincc(p[0], x)
    if kind == "u" and k == "identity":
        return np.exp(-x) / lam
    if kind == "mu" and k in ("stable", "stable_sum"):
        pairs = [(1.0, p[0])] if k == "stable" else list(zip(p[0::2], p[1::2]))
        out = np.zeros_like(lam)
        for w, s in pairs:
            out += w * lam**s * (x ** (-s) * np.exp(-x) - _upper_gamma(1.0 - s, x)) / gamma(1.0 - s)
        return out
    if kind == "mu" and k == "identity":
        return np.zeros_like(lam)
    t, wt = _log_panels(t0, t_end)
    rho = _density(phi, kind, t)
    out = np.empty_like(lam)
    for i in range(0, lam.size, 2048):
        out[i : i + 2048] = np.exp(-np.outer(lam[i : i + 2048], t)) @ (wt * rho)
    return out


def _large_weights(phi, kind, lam, t0, t_end):
    """Integral of exp(-lam t) * density over t >= t0 (tail beyond ``t_end`` dropped)."""
    lam = np.ascontiguousarray(lam, dtype=float)
    return _large_weights_cached(phi, kind, lam.tobytes(), float(t0), float(t_end))


def _small_free(phi, kind, a, t0, dim):
    """Integral over (0, t0) of (4 pi t)^(-d/2) exp(-a/t) times the density, for a > 0."""
    a = np.asarray(a, dtype=float)
    k, p = phi.kind, phi.params
    c = (4 * math.pi) ** (-dim / 2)
    h = dim / 2
    if kind == "u" and k == "stable":
        s = p[0]
        return c * a ** (s - h) * _upper_gamma(h - s, a / t0) / gamma(s)
    if kind == "u" and k == "identity":
        return c * a ** (1 - h) * _upper_gamma(h - 1, a / t0)
    if kind == "mu" and k in ("stable", "stable_sum"):
        pairs = [(1.0, p[0])] if k == "stable" else list(zip(p[0::2], p[1::2]))
        out = np.zeros_like(a)
        for w, s in pairs:
            out += c * w * s / gamma(1 - s) * a ** (-h - s) * _upper_gamma(h + s, a / t0)
        return out
    if kind == "mu" and k == "identity":
        return np.zeros_like(a)
    t_lo = max(float(a.min()) / 60.0, t0 * 1e-14)
    t, wt = _log_panels(t_lo, t0)
    rho = _density(phi, kind, t) * wt * c * t ** (-h)
    out = np.empty_like(a)
    flat = a.ravel()
    res = out.ravel()
    for i in range(0, flat.size, 1024):
        res[i : i + 1024] = np.exp(-flat[i : i + 1024, None] / t[None, :]) @ rho
    return res.reshape(a.shape)


def _small_halfline(phi, delta, t0):
    """Integral over (0, t0) of the half-line exit-time density against u."""
    d = np.asarray(delta, dtype=float)
    k, p = phi.kind, phi.params
    if k == "stable":
        s = p[0]
        b = 1.5 - s
        return d / math.sqrt(4 * math.pi) * (d * d / 4) ** (s - 1.5) * _upper_gamma(b, d * d / (4 * t0)) / gamma(s)
    if k == "identity":
        return erfc(d / (2 * math.sqrt(t0)))
    t_lo = max(float(d.min()) ** 2 / 240.0, t0 * 1e-14)
    t, wt = _log_panels(t_lo, t0)
    u = _density(phi, "u", t) * wt
    dens = d[:, None] / np.sqrt(4 * math.pi * t[None, :] ** 3) * np.exp(-d[:, None] ** 2 / (4 * t[None, :]))
    return dens @ u


def _small_exit_mass(phi, delta, t0):
    """Integral over (0, t0) of the half-line exit probability against the Levy density."""
    d = np.asarray(delta, dtype=float)
    if phi.kind == "identity":
        return np.zeros_like(d)
    t_lo = max(float(d.min()) ** 2 / 240.0, t0 * 1e-16)
    t, wt = _log_panels(t_lo, t0)
    mu = _density(phi, "mu", t) * wt
    # below t_lo the exit probability is below 1e-27 and is dropped
    return erfc(d[:, None] / (2 * np.sqrt(t[None, :]))) @ mu


def _crossover(lam_max, dim, area, tol=1e-8):
    """Time at which a Weyl-model bound on the spectral tail falls below ``tol``."""
    c = area * dim * (2.0 if dim == 1 else math.pi) / (2.0 * (2 * math.pi) ** dim)

    def tail(t):
        return c * t ** (-dim) * _upper_gamma(dim, lam_max * t) - tol

    lo, hi = 1e-3 / lam_max, 200.0 / lam_max
    return brentq(tail, lo, hi, xtol=1e-14 / lam_max)


# ------------------------------------------------------------- image terms


def _images(geom, X, Y):
    """(sign, squared distance, gradient in y) triples for the small-time image approximation."""
    if isinstance(geom, Disk):
        d2 = np.sum((X - Y) ** 2, axis=1)
        nx2 = np.sum(X * X, axis=1)
        rho2 = nx2 * np.sum(Y * Y, axis=1) - 2 * np.sum(X * Y, axis=1) + 1.0
        return [
            (1.0, d2, -2 * (X - Y)),
            (-1.0, np.maximum(rho2, d2), 2 * nx2[:, None] * Y - 2 * X),
        ]
    if isinstance(geom, (Interval, Rectangle)):
        sides = [geom.length] if isinstance(geom, Interval) else [geom.a, geom.b]
        dim = len(sides)
        terms = [(1.0, np.zeros(X.shape[0]), np.zeros_like(X))]
        for ax, L in enumerate(sides):
            x, y = X[:, ax], Y[:, ax]
            one = []
            for n in (-1, 0, 1):
                one.append((1.0, (x - y + 2 * n * L) ** 2, -2 * (x - y + 2 * n * L)))
                one.append((-1.0, (x + y + 2 * n * L) ** 2, 2 * (x + y + 2 * n * L)))
            merged = []
            for s1, q1, g1 in terms:
                for s2, q2, g2 in one:
                    g = g1.copy()
                    g[:, ax] = g2
                    merged.append((s1 * s2, q1 + q2, g))
            terms = merged
        assert all(t[2].shape[1] == dim for t in terms)
        return terms
    raise TypeError("image approximation needs an analytic shape")


def _image_heat(geom, t, X, Y):
    d = geom.dim
    out = np.zeros(X.shape[0])
    for sign, q, _ in _images(geom, X, Y):
        out += sign * (4 * math.pi * t) ** (-d / 2) * np.exp(-q / (4 * t))
    return out


def _image_small(geom, phi, kind, t0, X, Y):
    out = np.zeros(X.shape[0])
    for sign, q, _ in _images(geom, X, Y):
        out += sign * _small_free(phi, kind, q / 4.0, t0, geom.dim)
    return out


def _image_small_slope(geom, phi, t0, X, Z, Nrm):
    """Inward normal derivative in the second variable, at boundary points, of the small-time part."""
    out = np.zeros(X.shape[0])
    for sign, q, grad in _images(geom, X, Z):
        dq = np.sum(Nrm * grad, axis=1)
        out += sign * (-dq / 4.0) * 4 * math.pi * _small_free(phi, "u", q / 4.0, t0, geom.dim + 2)
    return out


# ------------------------------------------------------------ fine grids


class Synthesizer:
    """Evaluate point-spectrum expansions on a tensor (polar or box) grid.

    ``synth`` maps coefficient rows to nodal values using separable radial
    and angular tables on the disk and coordinate tables on boxes; angular
    orders beyond the grid's Nyquist limit are folded, so any grid works.
    """

    def __init__(self, spec, grid):
        modes = spec.modes
        self.grid = grid
        self.kind = grid.shape
        self.modes = modes
        if isinstance(grid, Disk):
            self.table = jv(modes.u_order[:, None], modes.u_zero[:, None] * grid.r[None, :])
            self.groups = {}
            for j, (n, k) in enumerate(zip(modes.order, modes.kind)):
                self.groups.setdefault((int(n), int(k)), []).append(j)
            self.groups = {key: np.array(v) for key, v in self.groups.items()}
        elif isinstance(grid, Rectangle):
            mmax, nmax = int(modes.m.max()), int(modes.n.max())
            self.sx = np.sin(np.outer(np.arange(1, mmax + 1), grid.x) * math.pi / grid.a)
            self.sy = np.sin(np.outer(np.arange(1, nmax + 1), grid.y) * math.pi / grid.b)
        elif grid is spec.geom:
            self.table = spec.nodal
        else:
            self.table = spec.evaluate(grid.nodes)
        self.nodes = grid.nodes
        self.weights = grid.weights

    def synth(self, C):
        """Nodal values of the expansions with coefficient rows ``C`` (P, modes)."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if self.kind == "disk":
            m = self.modes
            coef = C * m.scale[None, :]
            n_r, n_t = self.grid.grid_shape
            X = np.zeros((C.shape[0], n_r, n_t), dtype=complex)
            for (n, k), idx in self.groups.items():
                prof = coef[:, idx] @ self.table[m.pair[idx]]
                X[:, :, n % n_t] += prof if k != 2 else -1j * prof
            return (np.fft.ifft(X, axis=2).real * n_t).reshape(C.shape[0], -1)
        if self.kind == "rectangle":
            m = self.modes
            mi = m.m.astype(int) - 1
            ni = m.n.astype(int) - 1
            out = np.empty((C.shape[0], self.nodes.shape[0]))
            for p in range(C.shape[0]):
                A = np.zeros((self.sx.shape[0], self.sy.shape[0]))
                np.add.at(A, (mi, ni), C[p] * m.c)
                out[p] = (self.sx.T @ A @ self.sy).ravel()
            return out
        return C @ self.table

    def integrate(self, F, G):
        return np.sum(F * G * self.weights, axis=-1)


def _fine_grid(ks):
    geom, spec = ks.geom, ks.points
    K = math.sqrt(spec.lam_max)
    if isinstance(geom, Disk):
        n_max = int(spec.modes.order.max())
        n_t = 1 << int(math.ceil(math.log2(2 * n_max + 8)))
        return Disk(int(K) + 48, n_t)
    if isinstance(geom, Rectangle):
        return Rectangle(geom.a, geom.b, int(K * geom.a / math.pi) + 40, int(K * geom.b / math.pi) + 40)
    if isinstance(geom, Interval):
        return Interval(geom.length, int(K * geom.length / math.pi) + 64)
    return geom


def FineQuadrature(ks):
    """Synthesizer on a grid that integrates products of two point-spectrum fields exactly."""
    return Synthesizer(ks.points, _fine_grid(ks))


# ---------------------------------------------------------------- kernel set


class KernelSet:
    """Everything needed to evaluate kernels for one (phi, domain, N).

    Attributes
    ----------
    spectrum : the first ``N`` eigenpairs (used by operators and solvers).
    points : the extended spectrum for pointwise kernels.
    filter : smooth spectral filter on ``points`` (one on the low modes).
    t0 : small-time crossover for pointwise heat kernels.
    resolution : length scale pi / sqrt(lambda_max) resolved by ``points``.
    """

    def __init__(self, phi, geom: DomainGeometry, N=400, *, point_factor=25, mean_count=None, filter_start=0.3):
        self.phi = phi
        self.geom = geom
        self.N = int(N)
        self.spectrum = build_spectrum(geom, self.N)
        if geom.analytic:
            self.points = build_spectrum(geom, point_factor * self.N)
            k = np.sqrt(self.points.eigenvalues / self.points.lam_max)
            self.filter = 1.0 - _smoothstep((k - filter_start) / (1.0 - filter_start))
        else:
            self.points = self.spectrum
            self.filter = np.ones(self.N)
        self.resolution = math.pi / math.sqrt(self.points.lam_max)
        self.t0 = _crossover(self.points.lam_max, geom.dim, geom.area)
        self.t_coarse = _crossover(self.spectrum.lam_max, geom.dim, geom.area)
        self.t_end = 60.0 / float(self.spectrum.eigenvalues[0])
        if mean_count is None:
            mean_count = {"disk": 20000, "interval": 20000, "rectangle": 40000}.get(geom.shape, 0)
        self.mean_count = mean_count
        self.phi_values = bn.phi_eval(phi, self.points.eigenvalues)

    def __repr__(self):
        return f"KernelSet({self.phi.label()}, {self.geom.shape}, N={self.N})"

    @cached_property
    def conj(self):
        return bn.conjugate(self.phi).conj

    @cached_property
    def conj_values(self):
        return bn.phi_eval(self.conj, self.points.eigenvalues)

    @cached_property
    def means(self):
        return mean_spectrum(self.geom, self.mean_count)

    @cached_property
    def t0_mean(self):
        return _crossover(self.means.lam_max, self.geom.dim, self.geom.area)

    @cached_property
    def fine(self):
        return FineQuadrature(self)

    @cached_property
    def node_synth(self):
        return Synthesizer(self.points, self.geom)

    @cached_property
    def field(self):
        return build_field_operator(self.geom)

    @cached_property
    def sigma_field(self):
        """Discrete Poisson integral of the surface measure on the quadrature nodes."""
        g = self.geom
        one = np.ones(g.boundary_nodes.shape[0])
        return self.field.apply(self.inverse_symbol, self.field.boundary_source(one))

    def inverse_symbol(self, lam):
        return 1.0 / bn.phi_eval(self.phi, lam)

    def symbol(self, lam):
        return bn.phi_eval(self.phi, lam)


# --------------------------------------------------------------- pair sums


def _pair_sum(spec, coef, X, Y):
    out = np.empty(X.shape[0])
    for i in range(0, X.shape[0], _CHUNK):
        A = spec.evaluate(X[i : i + _CHUNK])
        B = spec.evaluate(Y[i : i + _CHUNK])
        out[i : i + _CHUNK] = np.einsum("j,jp,jp->p", coef, A, B)
    return out


def _broadcast(geom, x, y):
    X, sx = _points(geom, x)
    Y, sy = _points(geom, y)
    if X.shape[0] == 1 and Y.shape[0] > 1:
        X = np.repeat(X, Y.shape[0], axis=0)
    if Y.shape[0] == 1 and X.shape[0] > 1:
        Y = np.repeat(Y, X.shape[0], axis=0)
    if X.shape != Y.shape:
        raise ValueError("point arrays must have matching lengths")
    return X, Y, sx and sy


def _finish(val, diag, single, diagonal):
    if np.any(diag):
        if diagonal == "raise":
            raise DiagonalError("kernel is infinite on the diagonal")
        val = np.where(diag, np.inf, val)
    return float(val[0]) if single else val


def heat_kernel(ks: KernelSet, t, x, y):
    """Dirichlet heat kernel p_D(t, x, y)."""
    if t <= 0:
        raise ValueError("t must be positive")
    X, Y, single = _broadcast(ks.geom, x, y)
    if t >= ks.t0 or not ks.geom.analytic:
        val = _pair_sum(ks.points, np.exp(-ks.points.eigenvalues * t), X, Y)
    else:
        val = _image_heat(ks.geom, t, X, Y)
    return float(val[0]) if single else val


def _green_weights(ks, which):
    lam = ks.points.eigenvalues
    if which == "phi":
        g = 1.0 / ks.phi_values
    elif which == "conj":
        g = 1.0 / ks.conj_values
    else:
        g = 1.0 / lam
    return ks.filter * g


def _density_spec(ks, which):
    if which == "conj":
        return ks.conj
    return {"phi": ks.phi, "classic": bn.identity()}[which]


def _subordinated(ks, spec_phi, kind, X, Y, spectrum=None, t_split=None):
    spectrum = ks.points if spectrum is None else spectrum
    t_split = ks.t0 if t_split is None else t_split
    W = _large_weights(spec_phi, kind, spectrum.eigenvalues, t_split, ks.t_end)
    return _pair_sum(spectrum, W, X, Y) + _image_small(ks.geom, spec_phi, kind, t_split, X, Y)


def green_phi(ks: KernelSet, x, y, route="spectral", *, which="phi", diagonal="raise"):
    """Green kernel of the spectral operator; ``which`` selects phi, its conjugate or the Laplacian."""
    X, Y, single = _broadcast(ks.geom, x, y)
    diag = np.all(X == Y, axis=1)
    if route == "spectral":
        val = _pair_sum(ks.points, _green_weights(ks, which), X, Y)
    elif route == "subordination":
        if not ks.geom.analytic:
            raise ValueError("subordination route needs an analytic shape")
        val = _subordinated(ks, _density_spec(ks, which), "u", X, Y)
    else:
        raise ValueError(f"unknown route {route!r}")
    return _finish(val, diag, single, diagonal)


def green_classic(ks: KernelSet, x, y, route="spectral", *, diagonal="raise"):
    """Green kernel of the Dirichlet Laplacian."""
    return green_phi(ks, x, y, route, which="classic", diagonal=diagonal)


def jump_kernel(ks: KernelSet, x, y, *, diagonal="raise", coarse=False):
    """Jumping density: the heat kernel integrated against the Levy density.

    ``coarse`` uses the first ``N`` modes with a later crossover; it is
    cheaper and is what the pointwise operator uses.
    """
    X, Y, single = _broadcast(ks.geom, x, y)
    diag = np.all(X == Y, axis=1)
    if coarse:
        val = _subordinated(ks, ks.phi, "mu", X, Y, ks.spectrum, ks.t_coarse)
    else:
        val = _subordinated(ks, ks.phi, "mu", X, Y)
    return _finish(val, diag, single, diagonal)


def _mean_sum(ks, coef, X):
    m = ks.means
    out = np.empty(X.shape[0])
    for i in range(0, X.shape[0], _CHUNK):
        out[i : i + _CHUNK] = coef @ m.evaluate(X[i : i + _CHUNK])
    return out


def killing_function(ks: KernelSet, x):
    """Killing density: Levy-weighted probability of having left the domain."""
    X, single = _points(ks.geom, x)
    if ks.phi.kind == "identity":
        val = np.zeros(X.shape[0])
        return float(val[0]) if single else val
    m, t0 = ks.means, ks.t0_mean
    d = ks.geom.delta(X)
    W = _large_weights(ks.phi, "mu", m.eigenvalues, t0, ks.t_end)
    tail = float(bn.levy_tail(ks.phi, t0))
    val = _small_exit_mass(ks.phi, d, t0) + tail - _mean_sum(ks, m.means * W, X)
    return float(val[0]) if single else val


def poisson_sigma(ks: KernelSet, x):
    """Poisson integral of the surface measure, E_x[u(exit time)]."""
    X, single = _points(ks.geom, x)
    m, t0 = ks.means, ks.t0_mean
    d = ks.geom.delta(X)
    W = _large_weights(ks.phi, "u", m.eigenvalues, t0, ks.t_end)
    val = _small_halfline(ks.phi, d, t0) + _mean_sum(ks, m.means * m.eigenvalues * W, X)
    return float(val[0]) if single else val


def _boundary_points(geom, z):
    """Boundary coordinates and inward normals from node indices or coordinates."""
    z = np.asarray(z)
    if z.dtype.kind in "iu":
        idx = np.atleast_1d(z)
        return geom.boundary_nodes[idx], geom.normals[idx], z.ndim == 0
    Z, single = _points(geom, z.astype(float))
    if isinstance(geom, Disk):
        Z = Z / np.hypot(Z[:, 0], Z[:, 1])[:, None]
        return Z, -Z, single
    if isinstance(geom, Interval):
        n = np.where(Z[:, 0] < geom.length / 2, 1.0, -1.0)[:, None]
        return Z, n, single
    if isinstance(geom, Rectangle):
        dist = np.column_stack([Z[:, 1], geom.b - Z[:, 1], Z[:, 0], geom.a - Z[:, 0]])
        face = np.argmin(np.abs(dist), axis=1)
        table = np.array([[0, 1], [0, -1], [1, 0], [-1, 0]], dtype=float)
        return Z, table[face], single
    raise TypeError("boundary coordinates need an analytic shape; pass node indices")


def _poisson(ks, x, z, which, route):
    X, sx = _points(ks.geom, x)
    Z, Nrm, sz = _boundary_points(ks.geom, z)
    if X.shape[0] == 1 and Z.shape[0] > 1:
        X = np.repeat(X, Z.shape[0], axis=0)
    if Z.shape[0] == 1 and X.shape[0] > 1:
        Z = np.repeat(Z, X.shape[0], axis=0)
        Nrm = np.repeat(Nrm, X.shape[0], axis=0)
    spec = ks.points
    if route == "spectral":
        g = _green_weights(ks, which)
    elif route == "subordination":
        if not ks.geom.analytic:
            raise ValueError("subordination route needs an analytic shape")
        g = _large_weights(_density_spec(ks, which), "u", spec.eigenvalues, ks.t0, ks.t_end)
    else:
        raise ValueError(f"unknown route {route!r}")
    idx = np.arange(spec.count)
    out = np.empty(X.shape[0])
    for i in range(0, X.shape[0], _CHUNK):
        A = spec.evaluate(X[i : i + _CHUNK])
        S = spec.modes.slopes(Z[i : i + _CHUNK], Nrm[i : i + _CHUNK], idx)
        out[i : i + _CHUNK] = np.einsum("j,jp,jp->p", g, A, S)
    if route == "subordination":
        out += _image_small_slope(ks.geom, _density_spec(ks, which), ks.t0, X, Z, Nrm)
    return float(out[0]) if sx and sz else out


def poisson_phi(ks: KernelSet, x, z, route="spectral"):
    """Poisson kernel: inward normal derivative of the Green kernel at boundary point ``z``."""
    return _poisson(ks, x, z, "phi", route)


def poisson_classic(ks: KernelSet, x, z, route="spectral"):
    """Classical Poisson kernel of the Laplacian."""
    return _poisson(ks, x, z, "classic", route)


# ------------------------------------------------------------ closed forms


def disk_green_exact(x, y):
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    nx2 = np.sum(x * x, axis=1)
    rho2 = nx2 * np.sum(y * y, axis=1) - 2 * np.sum(x * y, axis=1) + 1.0
    d2 = np.sum((x - y) ** 2, axis=1)
    return np.log(rho2 / d2) / (4 * math.pi)


def disk_poisson_exact(x, z):
    x, z = np.atleast_2d(x), np.atleast_2d(z)
    return (1 - np.sum(x * x, axis=1)) / (2 * math.pi * np.sum((x - z) ** 2, axis=1))


# ------------------------------------------------------------ verification


@dataclass
class IdentityReport:
    mode_defect: float
    kernel_defects: np.ndarray
    passed: bool
    detail: dict = field(default_factory=dict)

    @property
    def max_defect(self):
        return float(np.max(self.kernel_defects)) if len(self.kernel_defects) else 0.0


def _field_coeffs(ks, X, g):
    """Coefficient rows g_j * phi_j(x) for each row of X."""
    return (ks.points.evaluate(X) * g[:, None]).T


def verify_factorization(ks: KernelSet, pairs, tol=2e-2) -> IdentityReport:
    """Compare the quadrature of G_phi(x,.) G_conj(.,y) with the Laplacian Green kernel."""
    lam = ks.points.eigenvalues
    mode = float(np.max(np.abs(ks.phi_values * ks.conj_values / lam - 1.0)))
    pairs = np.asarray(pairs, dtype=float)
    X, Y = pairs[:, 0], pairs[:, 1]
    fq = ks.fine
    F = fq.synth(_field_coeffs(ks, X, _green_weights(ks, "phi")))
    G = fq.synth(_field_coeffs(ks, Y, _green_weights(ks, "conj")))
    quad = fq.integrate(F, G)
    if isinstance(ks.geom, Disk):
        ref = disk_green_exact(X, Y)
    else:
        ref = green_classic(ks, X, Y)
    defects = np.abs(quad - ref) / np.abs(ref)
    ok = mode <= 1e-12 and bool(np.all(defects <= tol))
    return IdentityReport(mode, defects, ok, {"quadrature": quad, "reference": ref})


def verify_green_poisson_identity(ks: KernelSet, x, z, tol=3e-2) -> IdentityReport:
    """Compare the quadrature of G_conj(x,.) P_phi(.,z) with the classical Poisson kernel."""
    lam = ks.points.eigenvalues
    mode = float(np.max(np.abs(lam / (ks.phi_values * ks.conj_values) - 1.0)))
    X, _ = _points(ks.geom, x)
    Z, Nrm, _ = _boundary_points(ks.geom, z)
    if Z.shape[0] == 1 and X.shape[0] > 1:
        Z, Nrm = np.repeat(Z, X.shape[0], 0), np.repeat(Nrm, X.shape[0], 0)
    if X.shape[0] == 1 and Z.shape[0] > 1:
        X = np.repeat(X, Z.shape[0], 0)
    fq = ks.fine
    F = fq.synth(_field_coeffs(ks, X, _green_weights(ks, "conj")))
    S = ks.points.modes.slopes(Z, Nrm, np.arange(ks.points.count))
    P = fq.synth((S * _green_weights(ks, "phi")[:, None]).T)
    quad = fq.integrate(F, P)
    ref = disk_poisson_exact(X, Z) if isinstance(ks.geom, Disk) else poisson_classic(ks, X, Z)
    defects = np.abs(quad - ref) / np.abs(ref)
    ok = mode <= 1e-12 and bool(np.all(defects <= tol))
    return IdentityReport(mode, defects, ok, {"quadrature": quad, "reference": ref, "delta": ks.geom.delta(X)})


def verify_spectral_inversion(ks: KernelSet, j_max=20, n_points=40, seed=0):
    """Sup over sample points of |int G(x,.) phi_j - phi_j(x)/phi(lam_j)|, j <= j_max."""
    rng = np.random.default_rng(seed)
    X = _interior_samples(ks.geom, n_points, rng, floor=0.02)
    fq = ks.fine
    F = fq.synth(_field_coeffs(ks, X, _green_weights(ks, "phi")))
    E = ks.spectrum.evaluate(fq.nodes, np.arange(j_max))
    lhs = (F * fq.weights) @ E.T
    rhs = (ks.spectrum.evaluate(X, np.arange(j_max)) / bn.phi_eval(ks.phi, ks.spectrum.eigenvalues[:j_max])[:, None]).T
    return float(np.max(np.abs(lhs - rhs)))


def _radial_rule(n=200, q=4):
    """Nodes in (0,1) graded towards 1 as 1 - v**q, with weights."""
    v, w = np.polynomial.legendre.leggauss(n)
    v = (v + 1) / 2
    w = w / 2
    return 1.0 - v**q, w * q * v ** (q - 1)


def verify_killing_identity(ks: KernelSet, mode=1):
    """Relative defect of int kappa * phi_j against phi(lam_j) * int phi_j."""
    g = ks.geom
    j = mode - 1
    lam = ks.spectrum.eigenvalues[j]
    if isinstance(g, Disk):
        r, w = _radial_rule()
        pts = np.column_stack([r, np.zeros_like(r)])
        kap = killing_function(ks, pts)
        ph = ks.spectrum.evaluate(pts, [j])[0]
        if ks.spectrum.modes.order[j] != 0:
            raise ValueError("radial quadrature needs a radial mode")
        lhs = 2 * math.pi * np.sum(w * r * kap * ph)
    elif isinstance(g, Interval):
        v, w = _radial_rule()
        half = g.length / 2
        xs = np.concatenate([half * (1 - v), g.length - half * (1 - v)])
        ws = np.concatenate([w, w]) * half
        kap = killing_function(ks, xs[:, None])
        lhs = np.sum(ws * kap * ks.spectrum.evaluate(xs[:, None], [j])[0])
    else:
        kap = killing_function(ks, g.nodes)
        lhs = np.sum(g.weights * kap * ks.spectrum.nodal[j])
    rhs = float(bn.phi_eval(ks.phi, lam)) * float(ks.spectrum.means[j])
    return abs(lhs - rhs) / abs(rhs), lhs, rhs


# ------------------------------------------------------------- operators


def _exit_distance(geom, x, dirs):
    if isinstance(geom, Disk):
        b = dirs @ x
        return -b + np.sqrt(b * b - x @ x + 1.0)
    if isinstance(geom, Rectangle):
        out = np.full(dirs.shape[0], np.inf)
        for ax, L in ((0, geom.a), (1, geom.b)):
            d = dirs[:, ax]
            with np.errstate(divide="ignore"):
                t = np.where(d > 0, (L - x[ax]) / d, np.where(d < 0, -x[ax] / d, np.inf))
            out = np.minimum(out, t)
        return out
    raise TypeError("pointwise route supports the disk and rectangles")


def apply_operator(ks: KernelSet, u, route="spectral", points=None, *, eps=0.04, n_rho=48, n_theta=64):
    """Apply phi(-Laplacian) to ``u``.

    ``spectral``: ``u`` is a nodal array (or a callable evaluated at the
    nodes); returns values at ``points`` (default: the nodes).
    ``pointwise``: ``u`` must be a smooth callable; the principal value
    integral against the jumping density excludes balls of radius ``eps``
    and ``eps/2`` and extrapolates, then adds the killing term.
    """
    geom = ks.geom
    if route == "spectral":
        vals = u(geom.nodes) if callable(u) else np.asarray(u, dtype=float)
        spec = ks.spectrum
        c = spec.nodal @ (geom.weights * vals)
        g = bn.phi_eval(ks.phi, spec.eigenvalues) * c
        if points is None:
            return g @ spec.nodal
        P, _ = _points(geom, points)
        return g @ spec.evaluate(P)
    if route != "pointwise":
        raise ValueError(f"unknown route {route!r}")
    if not callable(u):
        raise TypeError("the pointwise route needs u as a callable")
    if points is None:
        raise ValueError("the pointwise route needs evaluation points")
    P, _ = _points(geom, points)
    if np.any(geom.delta(P) < 4 * eps):
        raise ValueError("evaluation point closer than 4*eps to the boundary")
    th = 2 * math.pi * np.arange(n_theta) / n_theta
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    gx, gw = np.polynomial.legendre.leggauss(n_rho)
    s_exp = 2.0 - 2.0 * (ks.phi.index or 0.5)
    out = np.empty(P.shape[0])
    for i, x in enumerate(P):
        ux = float(u(x[None, :])[0])
        rmax = _exit_distance(geom, x, dirs)
        vals = []
        for e in (eps, eps / 2):
            lo, hi = math.log(e), np.log(rmax)
            s = lo + (hi[:, None] - lo) * (gx[None, :] + 1) / 2
            rho = np.exp(s)
            w = gw[None, :] * (hi[:, None] - lo) / 2 * rho * rho * (2 * math.pi / n_theta)
            Y = x[None, None, :] + rho[:, :, None] * dirs[:, None, :]
            Y = Y.reshape(-1, 2)
            J = jump_kernel(ks, np.repeat(x[None, :], Y.shape[0], 0), Y, coarse=True)
            vals.append(np.sum(w.ravel() * (ux - u(Y)) * J))
        r = 2.0**s_exp
        out[i] = (r * vals[1] - vals[0]) / (r - 1) + float(killing_function(ks, x)) * ux
    return out


# ---------------------------------------------------------- sharp bounds


def _interior_samples(geom, n, rng, floor=0.0):
    lo = geom.nodes.min(axis=0)
    hi = geom.nodes.max(axis=0)
    out = []
    while len(out) < n:
        p = rng.uniform(lo, hi, size=(4 * n, geom.dim))
        p = p[geom.delta(p) > floor]
        out.extend(p.tolist())
    return np.array(out[:n])


def _near_boundary(geom, n, rng, floor, top):
    ks_ = rng.integers(0, geom.boundary_nodes.shape[0], n)
    d = np.exp(rng.uniform(math.log(floor), math.log(top), n))
    pts = geom.boundary_nodes[ks_] + d[:, None] * geom.normals[ks_]
    return pts


def stratified_sample(geom, n=40, seed=0, floor=0.03):
    """Pairs (x, y) in three strata: bulk, near-diagonal, near-boundary; plus (x, boundary index) pairs."""
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        x, y = _interior_samples(geom, 2, rng, 0.2)
        if np.linalg.norm(x - y) > 0.2:
            pairs.append((x, y))
    while len(pairs) < 2 * n:
        x = _interior_samples(geom, 1, rng, 0.1)[0]
        r = math.exp(rng.uniform(math.log(floor), math.log(0.1)))
        a = rng.uniform(0, 2 * math.pi)
        y = x + r * np.array([math.cos(a), math.sin(a)])[: geom.dim] if geom.dim == 2 else x + r
        if geom.delta(y[None, :])[0] > floor:
            pairs.append((x, y))
    while len(pairs) < 3 * n:
        x = _near_boundary(geom, 1, rng, floor, 0.1)[0]
        y = _near_boundary(geom, 1, rng, floor, 0.1)[0] if rng.random() < 0.5 else _interior_samples(geom, 1, rng, floor)[0]
        if np.linalg.norm(x - y) > floor and min(geom.delta(np.array([x, y]))) > floor:
            pairs.append((x, y))
    pairs = np.array(pairs)
    xs = np.vstack([_near_boundary(geom, 2 * n, rng, floor, 0.5), _interior_samples(geom, n, rng, 0.2)])
    zs = rng.integers(0, geom.boundary_nodes.shape[0], xs.shape[0])
    return {"pairs": pairs, "poisson_x": xs, "poisson_z": zs}


def green_comparison(ks, X, Y):
    r = np.linalg.norm(X - Y, axis=1)
    dx, dy = ks.geom.delta(X), ks.geom.delta(Y)
    d = ks.geom.dim
    return np.minimum(dx * dy / r**2, 1.0) / (r**d * bn.phi_eval(ks.phi, r**-2.0))


def jump_comparison(ks, X, Y):
    r = np.linalg.norm(X - Y, axis=1)
    dx, dy = ks.geom.delta(X), ks.geom.delta(Y)
    d = ks.geom.dim
    return np.minimum(dx * dy / r**2, 1.0) * bn.phi_eval(ks.phi, r**-2.0) / r**d


def poisson_comparison(ks, X, Z):
    r = np.linalg.norm(X - Z, axis=1)
    d = ks.geom.dim
    return ks.geom.delta(X) / (r ** (d + 2) * bn.phi_eval(ks.phi, r**-2.0))


def sigma_comparison(ks, delta):
    delta = np.asarray(delta, dtype=float)
    return 1.0 / (delta**2 * bn.phi_eval(ks.phi, delta**-2.0))


@dataclass
class RatioReport:
    kernel: str
    min_ratio: float
    max_ratio: float
    n_samples: int
    excluded_fraction: float
    ceiling: float

    @property
    def band(self):
        return self.max_ratio / self.min_ratio

    @property
    def passed(self):
        return bool(self.band <= self.ceiling)

    def to_dict(self):
        return {
            "kernel": self.kernel,
            "min_ratio": self.min_ratio,
            "max_ratio": self.max_ratio,
            "n_samples": self.n_samples,
            "excluded_fraction": self.excluded_fraction,
        }


def verify_sharp_bounds(ks: KernelSet, sample, ceilings=None, floor=None, route=None):
    """Ratio bands of kernel over comparison expression for G_phi, P_phi and J_D.

    Near the diagonal and the boundary the subordination route is the
    accurate one, so it is the default on analytic shapes.
    """
    route = route or ("subordination" if ks.geom.analytic else "spectral")
    ceilings = ceilings or {"green": 20.0, "poisson": 20.0, "jump": 30.0}
    floor = 2 * ks.resolution if floor is None else floor
    g = ks.geom
    pairs = sample["pairs"]
    X, Y = pairs[:, 0], pairs[:, 1]
    keep = (g.delta(X) >= floor) & (g.delta(Y) >= floor) & (np.linalg.norm(X - Y, axis=1) >= floor)
    Xk, Yk = X[keep], Y[keep]
    excl = 1.0 - keep.mean()
    out = {}
    rg = green_phi(ks, Xk, Yk, route) / green_comparison(ks, Xk, Yk)
    out["green"] = RatioReport("green", float(rg.min()), float(rg.max()), int(keep.sum()), float(excl), ceilings["green"])
    if ks.phi.kind != "identity":
        rj = jump_kernel(ks, Xk, Yk) / jump_comparison(ks, Xk, Yk)
        out["jump"] = RatioReport("jump", float(rj.min()), float(rj.max()), int(keep.sum()), float(excl), ceilings["jump"])
    xs, zs = sample["poisson_x"], sample["poisson_z"]
    kp = g.delta(xs) >= floor
    Z = g.boundary_nodes[zs[kp]]
    rp = poisson_phi(ks, xs[kp], zs[kp], route) / poisson_comparison(ks, xs[kp], Z)
    out["poisson"] = RatioReport(
        "poisson", float(rp.min()), float(rp.max()), int(kp.sum()), float(1 - kp.mean()), ceilings["poisson"]
    )
    return out


# ------------------------------------------------------------------ dumps


def dump_kernel_csv(path, X, Y, values, route):
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "y1", "y2", "value", "route"])
        for x, y, v in zip(X, Y, np.atleast_1d(values)):
            xp = list(x) + [0.0] * (2 - len(x))
            yp = list(y) + [0.0] * (2 - len(y))
            w.writerow([*(f"{c:.12g}" for c in xp), *(f"{c:.12g}" for c in yp), f"{v:.15g}", route])


def dump_ratio_json(path, reports):
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports.values()], fh, indent=2, sort_keys=True)
