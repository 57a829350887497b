"""Green potentials, Poisson integrals and their behaviour at the boundary.

Densities are integrated with the discrete field operator, whose Green
matrix is entrywise nonnegative, so nonnegative data give nonnegative
potentials at every node.  Atoms use the spectral kernels evaluated on the
node grid.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from . import bernstein as bn
from .kernels import KernelSet, _green_weights
from .spectral_domain import Disk, Interval, Rectangle

__all__ = [
    "BoundaryMeasure",
    "InfiniteProfile",
    "InteriorMeasure",
    "UProfile",
    "default_ray",
    "delta_norm",
    "dump_series_csv",
    "norm_constant",
    "green_apply",
    "green_potential",
    "pointwise_boundary_ratio",
    "poisson_integral",
    "poisson_kernel_field",
    "u_profile_bound",
    "weak_boundary_trace",
]


class InfiniteProfile(ValueError):
    """The potential of U(delta) is infinite because U fails the integrability condition."""

    classification = "infinite"


def delta_norm(geom, f):
    """Weighted L1 norm with weight equal to the distance to the boundary."""
    return float(np.sum(geom.weights * geom.node_delta * np.abs(f)))


def norm_constant(ks, u, lam=None, zeta=None):
    """Ratio of the weighted L1 norm of ``u`` to the size of its data."""
    g = ks.geom
    size = 0.0
    if lam is not None:
        size += lam.weighted_variation(g)
    if zeta is not None:
        size += zeta.total_variation(g)
    return delta_norm(g, u) / size if size > 0 else 0.0


def dump_series_csv(path, abscissa, value, reference, name="delta"):
    """Write rows (abscissa, value, reference, relative_error)."""
    ref = np.broadcast_to(np.asarray(reference, dtype=float), np.shape(value))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([name, "value", "reference", "relative_error"])
        for a, v, r in zip(abscissa, value, ref):
            rel = abs(v - r) / abs(r) if r != 0 else abs(v)
            w.writerow([repr(float(a)), repr(float(v)), repr(float(r)), repr(float(rel))])


@dataclass
class InteriorMeasure:
    """Signed interior measure: a nodal density plus atoms ``(point, weight)``."""

    density: np.ndarray | None = None
    atoms: list = field(default_factory=list)

    def weighted_variation(self, geom):
        total = delta_norm(geom, self.density) if self.density is not None else 0.0
        for p, w in self.atoms:
            total += abs(w) * float(geom.delta(np.asarray(p, dtype=float))[0])
        return total

    def validate(self, geom):
        for p, _ in self.atoms:
            if geom.delta(np.asarray(p, dtype=float))[0] <= 0:
                raise ValueError("atoms must lie strictly inside the domain")
        if self.density is not None and not np.isfinite(self.weighted_variation(geom)):
            raise ValueError("weighted total variation is infinite")


@dataclass
class BoundaryMeasure:
    """Signed boundary measure: density against the surface measure plus atoms ``(node index, weight)``."""

    density: np.ndarray | None = None
    atoms: list = field(default_factory=list)

    @classmethod
    def sigma(cls, geom):
        return cls(np.ones(geom.boundary_nodes.shape[0]))

    @classmethod
    def from_function(cls, geom, f):
        return cls(np.asarray(f(geom.boundary_nodes), dtype=float))

    @classmethod
    def point_mass(cls, k, weight=1.0):
        return cls(None, [(int(k), float(weight))])

    def total_variation(self, geom):
        total = 0.0
        if self.density is not None:
            total += float(np.sum(geom.boundary_weights * np.abs(self.density)))
        return total + sum(abs(w) for _, w in self.atoms)

    def nodal(self, geom):
        """Density against the boundary weights with atoms folded into their nodes."""
        out = np.zeros(geom.boundary_nodes.shape[0])
        if self.density is not None:
            out += self.density
        for k, w in self.atoms:
            out[k] += w / geom.boundary_weights[k]
        return out


def green_apply(ks: KernelSet, f):
    """Discrete Green operator applied to a nodal function."""
    return ks.field.apply(ks.inverse_symbol, np.asarray(f, dtype=float))


def green_potential(ks: KernelSet, lam: InteriorMeasure):
    """Green potential of an interior measure on the quadrature nodes."""
    g = ks.geom
    lam.validate(g)
    out = np.zeros(g.nodes.shape[0])
    if lam.density is not None:
        out += green_apply(ks, lam.density)
    if lam.atoms:
        pts = np.array([np.atleast_1d(np.asarray(p, dtype=float)) for p, _ in lam.atoms])
        w = np.array([wt for _, wt in lam.atoms])
        C = (ks.points.evaluate(pts) * _green_weights(ks, "phi")[:, None]).T
        out += w @ ks.node_synth.synth(C)
        for p in pts:
            hit = np.all(g.nodes == p, axis=1)
            if hit.any():
                warnings.warn("atom on a quadrature node: value set to the diagonal tag (inf)", RuntimeWarning)
                out[hit] = np.inf
    return out


def poisson_integral(ks: KernelSet, zeta: BoundaryMeasure):
    """Poisson integral of a boundary measure on the quadrature nodes."""
    dens = zeta.nodal(ks.geom)
    return ks.field.apply(ks.inverse_symbol, ks.field.boundary_source(dens))


def poisson_kernel_field(ks: KernelSet, k):
    """The Poisson kernel with pole at boundary node ``k`` as a nodal function."""
    return poisson_integral(ks, BoundaryMeasure.point_mass(k))


# ---------------------------------------------------------------- boundary


def default_ray(geom, k, n=12, top=None, bottom=None):
    """Node indices approaching boundary node ``k`` along its inward normal.

    Targets are ``n`` log-spaced distances from ``0.3 * inradius`` down to
    three times the outer node spacing; each is snapped to the nearest node
    on the normal line and duplicates are removed.
    """
    top = 0.3 * geom.inradius if top is None else top
    bottom = 3 * geom.spacing if bottom is None else bottom
    line = _normal_line(geom, k)
    d = geom.node_delta[line]
    targets = np.geomspace(top, bottom, n)
    pick = []
    for t in targets:
        j = line[np.argmin(np.abs(np.log(d / t)))]
        if j not in pick:
            pick.append(j)
    return np.array(pick)


def _normal_line(geom, k):
    """Nodes on the inward normal through boundary node ``k``, ordered towards the boundary."""
    if isinstance(geom, Disk):
        n_r, n_t = geom.grid_shape
        return np.arange(n_r) * n_t + k
    if isinstance(geom, Rectangle):
        nx, ny = geom.grid_shape
        if k < nx:
            return k * ny + np.arange(ny // 2)[::-1]
        if k < 2 * nx:
            return (k - nx) * ny + np.arange(ny // 2, ny)
        if k < 2 * nx + ny:
            return np.arange(nx // 2)[::-1] * ny + (k - 2 * nx)
        return np.arange(nx // 2, nx) * ny + (k - 2 * nx - ny)
    if isinstance(geom, Interval):
        n = geom.grid_shape[0]
        return np.arange(n // 2)[::-1] if k == 0 else np.arange(n // 2, n)
    i, j = geom.boundary_inner[k]
    di, dj = np.rint(geom.normals[k]).astype(int)
    out = []
    while geom.index[i, j] >= 0:
        out.append(geom.index[i, j])
        i, j = i + di, j + dj
    return np.array(out[::-1])


@dataclass
class RaySeries:
    delta: np.ndarray
    ratio: np.ndarray
    dropped: int = 0


def pointwise_boundary_ratio(ks: KernelSet, u, z, ray=None, floor=None):
    """Values u/P_sigma at ray nodes approaching boundary node ``z`` (decreasing distance)."""
    g = ks.geom
    ray = default_ray(g, z) if ray is None else np.asarray(ray)
    floor = 2 * g.spacing if floor is None else floor
    d = g.node_delta[ray]
    keep = d >= floor
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} ray points below the resolution floor dropped", RuntimeWarning)
    sig = ks.sigma_field[ray[keep]]
    u = np.asarray(u, dtype=float)[ray[keep]]
    return RaySeries(d[keep], u / sig, int((~keep).sum()))


def weak_boundary_trace(ks: KernelSet, u, t, testfn=None, min_nodes=50):
    """(1/t) times the collar integral of (u / P_sigma) * testfn over delta <= t."""
    g = ks.geom
    if t <= 2 * g.spacing:
        raise ValueError("collar width must exceed twice the node spacing")
    ratio = np.asarray(u, dtype=float) / ks.sigma_field
    vals = ratio * (testfn(g.nodes) if testfn is not None else 1.0)
    mask = g.collar(t)
    if mask.sum() < min_nodes:
        warnings.warn(f"collar holds only {int(mask.sum())} nodes", RuntimeWarning)
    if isinstance(g, Disk):
        return _disk_collar(g, vals, t) / t
    return float(np.sum(g.weights[mask] * vals[mask])) / t


def _disk_collar(g, vals, t):
    """Trapezoid rule in r over [1-t, 1] on every angular line, with the end values held constant."""
    n_r, n_t = g.grid_shape
    V = vals.reshape(n_r, n_t)
    r = g.r
    lo = 1.0 - t
    inside = r > lo
    rr = np.concatenate([[lo], r[inside], [1.0]])
    i0 = np.searchsorted(r, lo)
    if i0 == 0:
        v_lo = V[0]
    else:
        a = (lo - r[i0 - 1]) / (r[i0] - r[i0 - 1])
        v_lo = (1 - a) * V[i0 - 1] + a * V[i0]
    VV = np.vstack([v_lo, V[inside], V[-1]])
    radial = np.trapezoid(VV * rr[:, None], rr, axis=0)
    return float(np.sum(radial) * g.dtheta)


# --------------------------------------------------------------- U profiles


@dataclass(frozen=True)
class UProfile:
    """U(t) = t**(-beta) * log(e + 1/t)**r, or a bounded constant when beta = r = 0."""

    beta: float = 0.0
    r: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return t ** (-self.beta) * np.log(math.e + 1.0 / t) ** self.r

    @property
    def integrable(self):
        """U1: the integral of U(t) t over (0,1) is finite."""
        return self.beta < 2 or (self.beta == 2 and self.r < -1)

    @property
    def nonincreasing_constant(self):
        """U2: smallest C with U(t) <= C U(s) for s <= t, on a sample lattice."""
        t = np.geomspace(1e-8, 1e3, 400)
        v = self(t)
        run_min = np.minimum.accumulate(v)
        return float(np.max(v / run_min))

    @property
    def doubling_constant(self):
        """U3: smallest C with U(t) <= C U(2t) on a sample lattice."""
        t = np.geomspace(1e-8, 1e3, 400)
        return float(np.max(self(t) / self(2 * t)))

    @property
    def bounded_away(self):
        """U4: U is bounded on [c, inf) for every c > 0."""
        return self.beta >= 0 or self.r <= 0

    def flags(self):
        return {
            "U1": self.integrable,
            "U2": math.isfinite(self.nonincreasing_constant),
            "U3": math.isfinite(self.doubling_constant),
            "U4": self.bounded_away,
        }

    def moment(self):
        """Integral of U(t) t over (0, 1)."""
        if not self.integrable:
            return math.inf
        # t = exp(-v) turns the endpoint singularity into a slowly decaying tail
        def f(v):
            log_term = v + math.log1p(math.exp(1 - v)) if v > 1 else math.log(math.e + math.exp(v))
            return math.exp((self.beta - 2) * v) * log_term**self.r

        return sum(quad(f, a, b, limit=200)[0] for a, b in ((0, 1), (1, 10), (10, 100), (100, np.inf)))


def u_profile_rhs(phi, U: UProfile, delta, diam):
    """Three-term comparison value for the potential of U(delta)."""

    def inner(t):
        return float(U(t)) * t

    def outer(t):
        return float(U(t)) / (t * t * float(bn.phi_eval(phi, 1.0 / (t * t))))

    d = float(delta)
    first = quad(inner, 0, d, limit=200)[0] / (d * d * float(bn.phi_eval(phi, 1.0 / (d * d))))
    third = d * quad(outer, d, diam, limit=200)[0] if d < diam else 0.0
    return first + d + third


def u_profile_bound(ks: KernelSet, U: UProfile, x=None):
    """(lhs, rhs) at nodes ``x`` (indices); lhs is the discrete potential of U(delta)."""
    flags = U.flags()
    if not flags["U1"]:
        raise InfiniteProfile(f"U fails integrability (beta={U.beta}); potential is infinite")
    if not all(flags.values()):
        raise ValueError(f"U flags not all satisfied: {flags}")
    g = ks.geom
    lhs_field = green_apply(ks, U(g.node_delta))
    idx = np.arange(g.nodes.shape[0]) if x is None else np.atleast_1d(x)
    rhs = np.array([u_profile_rhs(ks.phi, U, g.node_delta[i], g.diam) for i in idx])
    return lhs_field[idx], rhs
