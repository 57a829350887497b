"""Domains, Dirichlet eigenpairs of the Laplacian and the discrete field operator.

Geometries carry a high order interior quadrature (Gauss-Legendre based for
the analytic shapes), boundary nodes with arc-length weights and inward
normals, and the distance to the boundary.  Spectra are analytic for the
interval, rectangle and disk and come from the five point Laplacian for a
grid mask.

`FieldOperator` is a finite-volume discretisation of the Dirichlet Laplacian
on the quadrature nodes.  Its off-diagonal couplings are nonpositive, so any
function ``g(A)`` with ``g`` completely monotone (heat semigroup, inverse of a
complete Bernstein function) acts as a nonnegative matrix.  It is diagonalised
exactly, block by block, and is what the potentials and solvers use.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import linalg, sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import distance_transform_edt
from scipy.sparse.linalg import splu
from scipy.special import jn_zeros, jv

__all__ = [
    "BandReport",
    "CacheError",
    "Disk",
    "DomainGeometry",
    "FieldOperator",
    "GridMask",
    "Interval",
    "Rectangle",
    "Spectrum",
    "build_field_operator",
    "build_spectrum",
    "coefficients",
    "disk_mask",
    "eigen_normal_derivative",
    "load_spectrum",
    "make_domain",
    "mean_spectrum",
    "save_spectrum",
    "verify_hopf",
    "verify_weyl",
]


class CacheError(RuntimeError):
    """A spectrum cache file failed validation."""


def _gauss(n, a, b):
    x, w = np.polynomial.legendre.leggauss(n)
    return a + (b - a) * (x + 1) / 2, w * (b - a) / 2


# ----------------------------------------------------------------- geometry


class DomainGeometry:
    """Base class; subclasses fill the attributes in ``__init__``."""

    shape: str
    dim: int
    nodes: np.ndarray
    weights: np.ndarray
    grid_shape: tuple
    boundary_nodes: np.ndarray
    boundary_weights: np.ndarray
    normals: np.ndarray
    area: float
    perimeter: float
    diam: float
    inradius: float
    spacing: float
    analytic = True

    def delta(self, pts):
        raise NotImplementedError

    def contains(self, pts):
        return self.delta(pts) > 0

    def descriptor(self) -> dict:
        raise NotImplementedError

    @cached_property
    def node_delta(self):
        return self.delta(self.nodes)

    def ray(self, k, deltas):
        """Points at the given distances along the inward normal at boundary node ``k``."""
        d = np.asarray(deltas, dtype=float)[:, None]
        return self.boundary_nodes[k][None, :] + d * self.normals[k][None, :]

    def collar(self, t):
        """Mask of quadrature nodes with distance to the boundary at most ``t``."""
        return self.node_delta <= t

    def _as_points(self, pts):
        p = np.asarray(pts, dtype=float)
        if p.ndim == 1:
            p = p[None, :] if self.dim > 1 or p.size == 1 else p[:, None]
        return p


class Interval(DomainGeometry):
    shape = "interval"
    dim = 1

    def __init__(self, length=math.pi, n=64):
        self.length = float(length)
        x, w = _gauss(n, 0.0, self.length)
        self.nodes = x[:, None]
        self.weights = w
        self.grid_shape = (n,)
        self.boundary_nodes = np.array([[0.0], [self.length]])
        self.boundary_weights = np.ones(2)
        self.normals = np.array([[1.0], [-1.0]])
        self.area = self.length
        self.perimeter = 2.0
        self.diam = self.length
        self.inradius = self.length / 2
        self.spacing = float(x[0])

    def delta(self, pts):
        p = self._as_points(pts)[:, 0]
        return np.clip(np.minimum(p, self.length - p), 0.0, None)

    def descriptor(self):
        return {"shape": "interval", "length": self.length, "n": self.grid_shape[0]}


class Rectangle(DomainGeometry):
    shape = "rectangle"
    dim = 2

    def __init__(self, a=1.0, b=1.0, nx=64, ny=64):
        self.a, self.b = float(a), float(b)
        self.x, self.wx = _gauss(nx, 0.0, self.a)
        self.y, self.wy = _gauss(ny, 0.0, self.b)
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])
        self.weights = np.outer(self.wx, self.wy).ravel()
        self.grid_shape = (nx, ny)
        bx, by = self.x, self.y
        self.boundary_nodes = np.vstack(
            [
                np.column_stack([bx, np.zeros(nx)]),
                np.column_stack([bx, np.full(nx, self.b)]),
                np.column_stack([np.zeros(ny), by]),
                np.column_stack([np.full(ny, self.a), by]),
            ]
        )
        self.boundary_weights = np.concatenate([self.wx, self.wx, self.wy, self.wy])
        self.normals = np.vstack(
            [
                np.tile([0.0, 1.0], (nx, 1)),
                np.tile([0.0, -1.0], (nx, 1)),
                np.tile([1.0, 0.0], (ny, 1)),
                np.tile([-1.0, 0.0], (ny, 1)),
            ]
        )
        self.area = self.a * self.b
        self.perimeter = 2 * (self.a + self.b)
        self.diam = math.hypot(self.a, self.b)
        self.inradius = min(self.a, self.b) / 2
        self.spacing = float(min(self.x[0], self.y[0]))

    def delta(self, pts):
        p = self._as_points(pts)
        d = np.minimum.reduce([p[:, 0], self.a - p[:, 0], p[:, 1], self.b - p[:, 1]])
        return np.clip(d, 0.0, None)

    def descriptor(self):
        nx, ny = self.grid_shape
        return {"shape": "rectangle", "a": self.a, "b": self.b, "nx": nx, "ny": ny}


class Disk(DomainGeometry):
    """Unit disk with a polar Gauss-Legendre by trapezoid quadrature.

    The boundary nodes sit at the same angles as the quadrature rings, so a
    ray along the inward normal at a boundary node passes through nodes.
    """

    shape = "disk"
    dim = 2

    def __init__(self, n_r=120, n_theta=160):
        self.r, wr = _gauss(n_r, 0.0, 1.0)
        self.wr = wr * self.r
        self.theta = 2 * np.pi * np.arange(n_theta) / n_theta
        self.dtheta = 2 * np.pi / n_theta
        R, T = np.meshgrid(self.r, self.theta, indexing="ij")
        self.nodes = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
        self.weights = np.outer(self.wr, np.full(n_theta, self.dtheta)).ravel()
        self.grid_shape = (n_r, n_theta)
        c, s = np.cos(self.theta), np.sin(self.theta)
        self.boundary_nodes = np.column_stack([c, s])
        self.boundary_weights = np.full(n_theta, self.dtheta)
        self.normals = -self.boundary_nodes
        self.area = math.pi
        self.perimeter = 2 * math.pi
        self.diam = 2.0
        self.inradius = 1.0
        self.spacing = float(1.0 - self.r[-1])

    def delta(self, pts):
        p = self._as_points(pts)
        return np.clip(1.0 - np.hypot(p[:, 0], p[:, 1]), 0.0, None)

    def descriptor(self):
        n_r, n_t = self.grid_shape
        return {"shape": "disk", "n_r": n_r, "n_theta": n_t}


def disk_mask(n):
    """Cells of an ``n`` by ``n`` grid on [-1,1]^2 whose centers lie in the unit disk."""
    h = 2.0 / n
    c = -1.0 + h * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(c, c, indexing="ij")
    return X**2 + Y**2 < 1.0, h, (-1.0, -1.0)


class GridMask(DomainGeometry):
    """Union of grid cells; Dirichlet data live on neighbouring exterior cell centres.

    Each exposed cell face contributes one boundary node placed at the
    exterior cell centre with weight ``h`` and the axis direction into the
    domain as normal.
    """

    shape = "gridmask"
    dim = 2
    analytic = False

    def __init__(self, mask, h, origin=(0.0, 0.0), label="custom"):
        mask = np.asarray(mask, dtype=bool)
        self.mask = np.pad(mask, 1)
        self.h = float(h)
        self.origin = (float(origin[0]) - self.h, float(origin[1]) - self.h)
        self.label = label
        nx, ny = self.mask.shape
        self.cx = self.origin[0] + self.h * (np.arange(nx) + 0.5)
        self.cy = self.origin[1] + self.h * (np.arange(ny) + 0.5)
        ii, jj = np.nonzero(self.mask)
        self.cells = np.column_stack([ii, jj])
        self.index = -np.ones(self.mask.shape, dtype=np.int64)
        self.index[ii, jj] = np.arange(ii.size)
        self.nodes = np.column_stack([self.cx[ii], self.cy[jj]])
        self.weights = np.full(ii.size, self.h**2)
        self.grid_shape = (ii.size,)
        bn, bw, nrm, inner = [], [], [], []
        for (di, dj) in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ei, ej = ii + di, jj + dj
            ext = ~self.mask[ei, ej]
            for a, b, ia, ib in zip(ei[ext], ej[ext], ii[ext], jj[ext]):
                bn.append((self.cx[a], self.cy[b]))
                nrm.append((-di, -dj))
                inner.append((ia, ib))
        self.boundary_nodes = np.array(bn, dtype=float)
        self.boundary_weights = np.full(len(bn), self.h)
        self.normals = np.array(nrm, dtype=float)
        self.boundary_inner = np.array(inner, dtype=np.int64)
        self.area = self.h**2 * ii.size
        self.perimeter = float(self.boundary_weights.sum())
        self.spacing = self.h
        ext_cells = np.column_stack(np.nonzero(~self.mask))
        self._ext_points = np.column_stack([self.cx[ext_cells[:, 0]], self.cy[ext_cells[:, 1]]])
        from scipy.spatial import ConvexHull, cKDTree

        self._tree = cKDTree(self._ext_points)
        hull = self.nodes[ConvexHull(self.nodes).vertices]
        self.diam = float(np.max(np.hypot(*(hull[:, None, :] - hull[None, :, :]).transpose(2, 0, 1))))
        self.inradius = float(self.delta(self.nodes).max())

    def delta(self, pts):
        p = self._as_points(pts)
        d, _ = self._tree.query(p)
        inside = self._inside(p)
        return np.where(inside, d, 0.0)

    @cached_property
    def node_delta(self):
        edt = distance_transform_edt(self.mask)
        return edt[self.mask] * self.h

    def _inside(self, p):
        i = np.floor((p[:, 0] - self.origin[0]) / self.h).astype(int)
        j = np.floor((p[:, 1] - self.origin[1]) / self.h).astype(int)
        ok = (i >= 0) & (j >= 0) & (i < self.mask.shape[0]) & (j < self.mask.shape[1])
        out = np.zeros(p.shape[0], dtype=bool)
        out[ok] = self.mask[i[ok], j[ok]]
        return out

    def descriptor(self):
        inner = self.mask[1:-1, 1:-1]
        return {
            "shape": "gridmask",
            "label": self.label,
            "h": self.h,
            "origin": [self.origin[0] + self.h, self.origin[1] + self.h],
            "mask_shape": list(inner.shape),
            "mask_hex": np.packbits(inner.ravel()).tobytes().hex(),
        }


def _geometry_from_descriptor(d):
    shape = d["shape"]
    if shape == "interval":
        return Interval(d["length"], d["n"])
    if shape == "rectangle":
        return Rectangle(d["a"], d["b"], d["nx"], d["ny"])
    if shape == "disk":
        return Disk(d["n_r"], d["n_theta"])
    if shape == "gridmask":
        n = int(np.prod(d["mask_shape"]))
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(d["mask_hex"]), dtype=np.uint8))[:n]
        mask = bits.astype(bool).reshape(d["mask_shape"])
        return GridMask(mask, d["h"], tuple(d["origin"]), d.get("label", "custom"))
    raise ValueError(f"unknown shape {shape!r}")


def make_domain(text="disk", n_modes=400):
    """Build a geometry from a short description.

    ``disk``, ``disk:n_r,n_theta``, ``interval[:L]``, ``rectangle[:a,b]``,
    ``square``, ``gridmask[:n]`` (unit disk mask on an n by n grid).
    Quadrature sizes default to values that integrate products of the first
    ``n_modes`` eigenfunctions exactly to rounding.
    """
    head, _, rest = text.strip().lower().partition(":")
    args = [float(v) for v in rest.split(",")] if rest else []
    root = math.sqrt(max(n_modes, 1))
    if head == "disk":
        if args:
            return Disk(int(args[0]), int(args[1]))
        return Disk(max(40, int(math.ceil(6 * root))), 8 * int(math.ceil(root)))
    if head == "interval":
        length = args[0] if args else math.pi
        return Interval(length, max(64, int(3 * n_modes)))
    if head in ("rectangle", "square"):
        a, b = (args + [1.0, 1.0])[:2] if head == "rectangle" else (1.0, 1.0)
        m = max(48, int(math.ceil(4 * root)))
        return Rectangle(a, b, m, m)
    if head == "gridmask":
        n = int(args[0]) if args else 96
        mask, h, origin = disk_mask(n)
        return GridMask(mask, h, origin, label=f"disk{n}")
    raise ValueError(f"unknown domain {text!r}")


# ------------------------------------------------------------------- spectra


@lru_cache(maxsize=16)
def _disk_mode_table(count, mean_only=False):
    """Orders, zeros and kinds of the first ``count`` disk modes (ascending)."""
    if mean_only:
        z = jn_zeros(0, count)
        return np.zeros(count, dtype=np.int64), z, np.zeros(count, dtype=np.int64)
    K = 2.0 * math.sqrt(count) + 3.0 * count**0.25 + 6.0
    while True:
        orders, zeros = [], []
        n = 0
        while True:
            m = int((K - n) / math.pi) + 3
            if m < 1:
                break
            z = jn_zeros(n, m)
            while z[-1] <= K:
                m *= 2
                z = jn_zeros(n, m)
            z = z[z <= K]
            if z.size == 0:
                break
            orders.append(np.full(z.size, n))
            zeros.append(z)
            n += 1
        orders = np.concatenate(orders)
        zeros = np.concatenate(zeros)
        mult = np.where(orders == 0, 1, 2)
        if mult.sum() >= count:
            break
        K *= 1.3
    o = np.argsort(zeros, kind="stable")
    orders, zeros = orders[o], zeros[o]
    n_out, z_out, k_out = [], [], []
    for n, z in zip(orders, zeros):
        if n == 0:
            n_out.append(0), z_out.append(z), k_out.append(0)
        else:
            n_out += [n, n]
            z_out += [z, z]
            k_out += [1, 2]
        if len(n_out) >= count:
            break
    return (np.array(n_out[:count]), np.array(z_out[:count]), np.array(k_out[:count]))


class _DiskModes:
    def __init__(self, count, mean_only=False):
        self.order, self.zero, self.kind = _disk_mode_table(count, mean_only)
        n, z = self.order, self.zero
        jn1 = np.abs(jv(n + 1, z))
        self.scale = np.where(n == 0, 1.0, math.sqrt(2.0)) / (math.sqrt(math.pi) * jn1)
        keys = {}
        self.pair = np.empty(n.size, dtype=np.int64)
        uo, uz = [], []
        for j, (nn, zz) in enumerate(zip(n, z)):
            key = (int(nn), float(zz))
            if key not in keys:
                keys[key] = len(uo)
                uo.append(nn)
                uz.append(zz)
            self.pair[j] = keys[key]
        self.u_order = np.array(uo)
        self.u_zero = np.array(uz)
        self.eigenvalues = z**2

    def _angular(self, theta, idx):
        n = self.order[idx][:, None]
        k = self.kind[idx][:, None]
        th = np.asarray(theta)[None, :]
        return np.where(k == 0, 1.0, np.where(k == 1, np.cos(n * th), np.sin(n * th)))

    def evaluate(self, pts, idx):
        r = np.hypot(pts[:, 0], pts[:, 1])
        th = np.arctan2(pts[:, 1], pts[:, 0])
        pairs = self.pair[idx]
        up, inv = np.unique(pairs, return_inverse=True)
        radial = jv(self.u_order[up][:, None], self.u_zero[up][:, None] * r[None, :])
        return self.scale[idx][:, None] * radial[inv] * self._angular(th, idx)

    def slopes(self, zpts, normals, idx):
        th = np.arctan2(zpts[:, 1], zpts[:, 0])
        n, z = self.order[idx], self.zero[idx]
        radial = self.scale[idx] * z * jv(n + 1, z)
        return radial[:, None] * self._angular(th, idx)

    def means(self, idx):
        n, z = self.order[idx], self.zero[idx]
        return np.where(n == 0, 2 * math.pi * self.scale[idx] * jv(1, z) / z, 0.0)


class _IntervalModes:
    def __init__(self, length, count, mean_only=False):
        self.length = length
        j = np.arange(1, count + 1) if not mean_only else 2 * np.arange(count) + 1
        self.j = j.astype(float)
        self.eigenvalues = (self.j * math.pi / length) ** 2

    def evaluate(self, pts, idx):
        x = pts[:, 0]
        k = self.j[idx][:, None] * math.pi / self.length
        return math.sqrt(2 / self.length) * np.sin(k * x[None, :])

    def slopes(self, zpts, normals, idx):
        k = self.j[idx][:, None] * math.pi / self.length
        grad = math.sqrt(2 / self.length) * k * np.cos(k * zpts[None, :, 0])
        return grad * normals[None, :, 0]

    def means(self, idx):
        j = self.j[idx]
        return math.sqrt(2 / self.length) * self.length / (j * math.pi) * (1 - np.cos(j * math.pi))


class _RectangleModes:
    def __init__(self, a, b, count, mean_only=False):
        self.a, self.b = a, b
        M = int(math.ceil(2.5 * math.sqrt(count) * max(a / b, 1.0))) + 4
        Nn = int(math.ceil(2.5 * math.sqrt(count) * max(b / a, 1.0))) + 4
        m, n = np.meshgrid(np.arange(1, M + 1), np.arange(1, Nn + 1), indexing="ij")
        m, n = m.ravel(), n.ravel()
        if mean_only:
            keep = (m % 2 == 1) & (n % 2 == 1)
            m, n = m[keep], n[keep]
        lam = math.pi**2 * (m**2 / a**2 + n**2 / b**2)
        o = np.lexsort((n, m, lam))[:count]
        if o.size < count:
            raise ValueError("mode table too small")
        self.m, self.n = m[o].astype(float), n[o].astype(float)
        self.eigenvalues = lam[o]
        self.c = 2.0 / math.sqrt(a * b)

    def evaluate(self, pts, idx):
        kx = self.m[idx][:, None] * math.pi / self.a
        ky = self.n[idx][:, None] * math.pi / self.b
        return self.c * np.sin(kx * pts[None, :, 0]) * np.sin(ky * pts[None, :, 1])

    def slopes(self, zpts, normals, idx):
        kx = self.m[idx][:, None] * math.pi / self.a
        ky = self.n[idx][:, None] * math.pi / self.b
        x, y = zpts[None, :, 0], zpts[None, :, 1]
        gx = self.c * kx * np.cos(kx * x) * np.sin(ky * y)
        gy = self.c * ky * np.sin(kx * x) * np.cos(ky * y)
        return gx * normals[None, :, 0] + gy * normals[None, :, 1]

    def means(self, idx):
        m, n = self.m[idx], self.n[idx]
        mx = self.a / (m * math.pi) * (1 - np.cos(m * math.pi))
        my = self.b / (n * math.pi) * (1 - np.cos(n * math.pi))
        return self.c * mx * my


class _GridModes:
    """Nodal eigenvectors of the five point Laplacian on a grid mask."""

    def __init__(self, geom, eigenvalues, nodal):
        self.geom = geom
        self.eigenvalues = eigenvalues
        self.nodal = nodal

    def _full(self, j):
        g = self.geom
        arr = np.zeros(g.mask.shape)
        arr[g.cells[:, 0], g.cells[:, 1]] = self.nodal[j]
        return arr

    def evaluate(self, pts, idx):
        g = self.geom
        out = np.empty((len(idx), pts.shape[0]))
        for row, j in enumerate(idx):
            f = RegularGridInterpolator((g.cx, g.cy), self._full(j), bounds_error=False, fill_value=0.0)
            out[row] = f(pts)
        return out

    def slopes(self, zpts, normals, idx):
        g = self.geom
        h = g.h
        ci, cj = g.boundary_inner[:, 0], g.boundary_inner[:, 1]
        di = np.rint(normals[:, 0]).astype(int)
        dj = np.rint(normals[:, 1]).astype(int)
        out = np.empty((len(idx), zpts.shape[0]))
        for row, j in enumerate(idx):
            full = self._full(j)
            f1 = full[ci, cj]
            i2, j2 = ci + di, cj + dj
            ok = (i2 >= 0) & (j2 >= 0) & (i2 < full.shape[0]) & (j2 < full.shape[1])
            f2 = np.zeros_like(f1)
            f2[ok] = full[i2[ok], j2[ok]]
            inside2 = np.zeros_like(ok)
            inside2[ok] = g.mask[i2[ok], j2[ok]]
            out[row] = np.where(inside2, (4 * f1 - f2) / (2 * h), f1 / h)
        return out

    def means(self, idx):
        return self.nodal[idx] @ self.geom.weights


@dataclass
class Spectrum:
    """First ``count`` Dirichlet eigenpairs of the Laplacian on ``geom``."""

    geom: DomainGeometry
    eigenvalues: np.ndarray
    modes: object
    count: int = field(init=False)
    mean_only: bool = False

    def __post_init__(self):
        self.count = int(self.eigenvalues.size)

    def _idx(self, idx):
        return np.arange(self.count) if idx is None else np.atleast_1d(np.asarray(idx, dtype=np.int64))

    def evaluate(self, pts, idx=None):
        """Eigenfunction values, shape (modes, points); ``idx`` is 0-based."""
        pts = self.geom._as_points(pts)
        return self.modes.evaluate(pts, self._idx(idx))

    @cached_property
    def nodal(self):
        if isinstance(self.modes, _GridModes):
            return self.modes.nodal
        return self.evaluate(self.geom.nodes)

    @cached_property
    def slopes(self):
        """Inward normal derivatives at the boundary nodes, shape (modes, boundary nodes)."""
        g = self.geom
        return self.modes.slopes(g.boundary_nodes, g.normals, self._idx(None))

    @cached_property
    def means(self):
        return self.modes.means(self._idx(None))

    @cached_property
    def sup_constant(self):
        """Smallest c with max_nodes |phi_j| <= c * lam_j**(d/4) over the spectrum."""
        sup = np.abs(self.nodal).max(axis=1)
        return float(np.max(sup / self.eigenvalues ** (self.geom.dim / 4)))

    @property
    def lam_max(self):
        return float(self.eigenvalues[-1])


def build_spectrum(geom: DomainGeometry, N: int) -> Spectrum:
    """First ``N`` eigenpairs, analytic for interval/rectangle/disk."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if isinstance(geom, Disk):
        modes = _DiskModes(N)
    elif isinstance(geom, Interval):
        modes = _IntervalModes(geom.length, N)
    elif isinstance(geom, Rectangle):
        modes = _RectangleModes(geom.a, geom.b, N)
    elif isinstance(geom, GridMask):
        if N > 0.2 * geom.nodes.shape[0]:
            raise ValueError("N too large for the grid: at most 20% of the node count")
        lam, vec = _grid_eigensolve(geom, N)
        modes = _GridModes(geom, lam, vec)
    else:
        raise TypeError("unsupported geometry")
    return Spectrum(geom, np.asarray(modes.eigenvalues, dtype=float), modes)


def mean_spectrum(geom: DomainGeometry, count: int) -> Spectrum:
    """Eigenpairs with nonzero mean only (radial modes on the disk, odd modes on boxes).

    Quantities driven by the constant function, such as the survival
    probability, expand in these modes alone, so many more of them can be kept.
    """
    if isinstance(geom, Disk):
        modes = _DiskModes(count, mean_only=True)
    elif isinstance(geom, Interval):
        modes = _IntervalModes(geom.length, count, mean_only=True)
    elif isinstance(geom, Rectangle):
        modes = _RectangleModes(geom.a, geom.b, count, mean_only=True)
    else:
        raise TypeError("mean-carrying spectrum needs an analytic shape")
    return Spectrum(geom, np.asarray(modes.eigenvalues, dtype=float), modes, mean_only=True)


def eigen_normal_derivative(spec: Spectrum, j: int, k: int) -> float:
    """Inward normal derivative of the ``j``-th eigenfunction (1-based) at boundary node ``k``."""
    if not 1 <= j <= spec.count:
        raise IndexError(f"mode {j} outside 1..{spec.count}")
    return float(spec.slopes[j - 1, k])


# ------------------------------------------------------- grid-mask eigensolve


def _five_point(geom: GridMask):
    idx = geom.index
    ii, jj = geom.cells[:, 0], geom.cells[:, 1]
    rows, cols, vals = [np.arange(ii.size)], [np.arange(ii.size)], [np.full(ii.size, 4.0)]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = idx[ii + di, jj + dj]
        ok = nb >= 0
        rows.append(np.nonzero(ok)[0])
        cols.append(nb[ok])
        vals.append(-np.ones(ok.sum()))
    A = sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ii.size, ii.size)
    )
    return A / geom.h**2


def _grid_eigensolve(geom: GridMask, N, tol=1e-10, max_iter=2000, seed=0):
    """Smallest ``N`` eigenpairs by block inverse iteration with Rayleigh-Ritz."""
    A = _five_point(geom)
    n = A.shape[0]
    block = min(n, N + max(8, N // 2))
    lu = splu(A.tocsc())
    rng = np.random.default_rng(seed)
    X = np.linalg.qr(rng.standard_normal((n, block)))[0]
    for _ in range(max_iter):
        Y = lu.solve(X)
        Q = np.linalg.qr(Y)[0]
        H = Q.T @ (A @ Q)
        theta, W = np.linalg.eigh((H + H.T) / 2)
        X = Q @ W
        R = A @ X[:, :N] - X[:, :N] * theta[:N]
        res = np.linalg.norm(R, axis=0) / theta[:N]
        if res.max() < tol:
            break
    else:
        raise RuntimeError(f"grid eigensolve did not converge: residual {res.max():.2e}")
    vec = X[:, :N].T / geom.h
    sign = np.sign(vec.sum(axis=1))
    sign[sign == 0] = 1.0
    vec *= sign[:, None]
    return theta[:N], vec


# ------------------------------------------------------------ verification


@dataclass
class BandReport:
    lower: float
    upper: float
    passed: bool
    detail: dict = field(default_factory=dict)

    @property
    def ratio(self):
        return self.upper / self.lower


def coefficients(spec: Spectrum, f):
    """Coefficients <f, phi_j> by quadrature and the Parseval defect."""
    f = np.asarray(f, dtype=float)
    w = spec.geom.weights
    c = spec.nodal @ (w * f)
    defect = float(np.sum(w * f * f) - np.sum(c * c))
    return c, defect


def orthonormality_defect(spec: Spectrum):
    w = spec.geom.weights
    G = (spec.nodal * w) @ spec.nodal.T
    return float(np.max(np.abs(G - np.eye(spec.count))))


def verify_weyl(spec: Spectrum) -> BandReport:
    j = np.arange(1, spec.count + 1)
    ratio = spec.eigenvalues * j ** (-2.0 / spec.geom.dim)
    lo, hi = float(ratio.min()), float(ratio.max())
    return BandReport(lo, hi, bool(np.isfinite(hi) and lo > 0))


def verify_hopf(spec: Spectrum, floor=None) -> BandReport:
    g = spec.geom
    floor = 2 * g.spacing if floor is None else floor
    d = g.node_delta
    keep = d > floor
    ratio = spec.nodal[0, keep] / d[keep]
    lo, hi = float(ratio.min()), float(ratio.max())
    positive = bool(np.all(spec.nodal[0] > 0))
    return BandReport(lo, hi, bool(positive and lo > 0 and np.isfinite(hi)), {"phi1_positive": positive})


# ------------------------------------------------------------- cache files

_MAGIC = b"PHGSPEC1"


def save_spectrum(spec: Spectrum, path):
    """Write eigenvalues and nodal eigenfunctions as little-endian float64."""
    lam = np.ascontiguousarray(spec.eigenvalues, dtype="<f8")
    nodal = np.ascontiguousarray(spec.nodal, dtype="<f8")
    payload = lam.tobytes() + nodal.tobytes()
    header = {
        "version": 1,
        "shape": spec.geom.shape,
        "grid": spec.geom.descriptor(),
        "N": spec.count,
        "n_nodes": int(nodal.shape[1]),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def load_spectrum(path) -> Spectrum:
    """Read a cache file, refusing it unless checksum and orthonormality hold."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise CacheError("not a spectrum cache file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    payload = data[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CacheError("checksum mismatch: cache file is corrupted")
    N, n_nodes = header["N"], header["n_nodes"]
    if len(payload) != 8 * N * (1 + n_nodes):
        raise CacheError("payload size does not match header")
    lam = np.frombuffer(payload[: 8 * N], dtype="<f8").astype(float)
    nodal = np.frombuffer(payload[8 * N :], dtype="<f8").astype(float).reshape(N, n_nodes)
    geom = _geometry_from_descriptor(header["grid"])
    if geom.analytic:
        spec = build_spectrum(geom, N)
        if np.max(np.abs(spec.nodal - nodal)) > 1e-10 or np.max(np.abs(spec.eigenvalues - lam)) > 1e-9:
            raise CacheError("cached values disagree with the analytic eigenpairs")
        tol = 1e-6
    else:
        spec = Spectrum(geom, lam, _GridModes(geom, lam, nodal))
        tol = 1e-3
    defect = orthonormality_defect(spec)
    if defect > tol:
        raise CacheError(f"orthonormality check failed on load: defect {defect:.2e}")
    return spec


# ---------------------------------------------------------- field operator


def _radial_fv(r, ang):
    """Finite-volume blocks for -Laplacian on a polar ring grid, one per angular eigenvalue."""
    n = r.size
    f = np.concatenate([[0.0], (r[1:] + r[:-1]) / 2, [1.0]])
    area = (f[1:] ** 2 - f[:-1] ** 2) / 2
    K = np.zeros((n, n))
    c = f[1:-1] / np.diff(r)
    K[np.arange(n - 1), np.arange(n - 1)] += c
    K[np.arange(1, n), np.arange(1, n)] += c
    K[np.arange(n - 1), np.arange(1, n)] -= c
    K[np.arange(1, n), np.arange(n - 1)] -= c
    cb = 1.0 / (1.0 - r[-1])
    K[-1, -1] += cb
    rad = (f[1:] - f[:-1]) / r
    mus, vecs = [], []
    for a in ang:
        mu, V = linalg.eigh(K + np.diag(rad * a), np.diag(area))
        mus.append(mu)
        vecs.append(V)
    return np.array(mus), np.array(vecs), area, cb


def _line_fv(x, a):
    n = x.size
    f = np.concatenate([[0.0], (x[1:] + x[:-1]) / 2, [a]])
    width = np.diff(f)
    K = np.zeros((n, n))
    c = 1.0 / np.diff(x)
    K[np.arange(n - 1), np.arange(n - 1)] += c
    K[np.arange(1, n), np.arange(1, n)] += c
    K[np.arange(n - 1), np.arange(1, n)] -= c
    K[np.arange(1, n), np.arange(n - 1)] -= c
    c0, c1 = 1.0 / x[0], 1.0 / (a - x[-1])
    K[0, 0] += c0
    K[-1, -1] += c1
    mu, V = linalg.eigh(K, np.diag(width))
    return mu, V, width, (c0, c1)


class FieldOperator:
    """Monotone finite-volume Dirichlet Laplacian on the quadrature nodes.

    ``apply(g, f)`` returns ``g(A) f`` through the exact eigendecomposition.
    ``boundary_source(zeta)`` turns boundary data (density against the
    boundary weights) into the interior source whose potential is the
    Poisson integral: ``apply(g, boundary_source(zeta))`` with ``g = 1/lam``
    reproduces the discrete harmonic extension.
    """

    def __init__(self, geom: DomainGeometry):
        self.geom = geom
        if isinstance(geom, Disk):
            n_r, n_t = geom.grid_shape
            m = np.arange(n_t // 2 + 1)
            ang = (2 - 2 * np.cos(m * geom.dtheta)) / geom.dtheta**2
            self.mu, self.V, self.area_r, self.cb = _radial_fv(geom.r, ang)
            self.mass = np.outer(self.area_r, np.full(n_t, geom.dtheta)).ravel()
            self.kind = "polar"
        elif isinstance(geom, Interval):
            self.mu, self.V, self.mass, self.cb = _line_fv(geom.nodes[:, 0], geom.length)
            self.kind = "line"
        elif isinstance(geom, Rectangle):
            self.mux, self.Vx, wx, self.cbx = _line_fv(geom.x, geom.a)
            self.muy, self.Vy, wy, self.cby = _line_fv(geom.y, geom.b)
            self.mu = self.mux[:, None] + self.muy[None, :]
            self.wxv, self.wyv = wx, wy
            self.mass = np.outer(wx, wy).ravel()
            self.kind = "tensor"
        elif isinstance(geom, GridMask):
            n = geom.nodes.shape[0]
            if n > 4000:
                raise ValueError("full decomposition limited to 4000 grid cells")
            A = _five_point(geom).toarray()
            self.mu, V = np.linalg.eigh((A + A.T) / 2)
            self.V = V / geom.h
            self.mass = geom.weights.copy()
            self.kind = "dense"
        else:
            raise TypeError("unsupported geometry")

    # spectral calculus -------------------------------------------------
    def apply(self, g, f):
        f = np.asarray(f, dtype=float)
        geom = self.geom
        if self.kind == "polar":
            n_r, n_t = geom.grid_shape
            F = np.fft.rfft(f.reshape(n_r, n_t), axis=1)
            Fw = F * self.area_r[:, None]
            coef = np.einsum("mrk,rm->km", self.V, Fw)
            coef *= g(self.mu).T
            out = np.einsum("mrk,km->rm", self.V, coef)
            return np.fft.irfft(out, n=n_t, axis=1).ravel()
        if self.kind == "line":
            return self.V @ (g(self.mu) * (self.V.T @ (self.mass * f)))
        if self.kind == "tensor":
            nx, ny = geom.grid_shape
            F = f.reshape(nx, ny) * self.wxv[:, None] * self.wyv[None, :]
            C = self.Vx.T @ F @ self.Vy
            C *= g(self.mu)
            return (self.Vx @ C @ self.Vy.T).ravel()
        return self.V @ (g(self.mu) * (self.V.T @ (self.mass * f)))

    def eigenvalues(self):
        return np.sort(np.asarray(self.mu).ravel())

    def boundary_source(self, zeta):
        """Interior source carrying boundary data ``zeta`` given at the boundary nodes."""
        zeta = np.asarray(zeta, dtype=float)
        geom = self.geom
        out = np.zeros(geom.nodes.shape[0])
        if self.kind == "polar":
            n_r, n_t = geom.grid_shape
            src = out.reshape(n_r, n_t)
            src[-1, :] = zeta * self.cb / self.area_r[-1]
            return out
        if self.kind == "line":
            out[0] += zeta[0] * self.cb[0] / self.mass[0]
            out[-1] += zeta[1] * self.cb[1] / self.mass[-1]
            return out
        if self.kind == "tensor":
            nx, ny = geom.grid_shape
            src = out.reshape(nx, ny)
            z = np.split(zeta, [nx, 2 * nx, 2 * nx + ny])
            src[:, 0] += z[0] * self.cby[0] / self.wyv[0]
            src[:, -1] += z[1] * self.cby[1] / self.wyv[-1]
            src[0, :] += z[2] * self.cbx[0] / self.wxv[0]
            src[-1, :] += z[3] * self.cbx[1] / self.wxv[-1]
            return out
        h = geom.h
        for k, (i, j) in enumerate(geom.boundary_inner):
            out[geom.index[i, j]] += zeta[k] * geom.boundary_weights[k] / h / geom.weights[geom.index[i, j]]
        return out

    def interpolate(self, f, pts):
        """Evaluate a node function at arbitrary points of the domain."""
        geom = self.geom
        pts = geom._as_points(pts)
        f = np.asarray(f, dtype=float)
        if self.kind == "polar":
            n_r, n_t = geom.grid_shape
            F = np.fft.rfft(f.reshape(n_r, n_t), axis=1) / n_t
            r = np.hypot(pts[:, 0], pts[:, 1])
            th = np.arctan2(pts[:, 1], pts[:, 0])
            m = np.arange(F.shape[1])
            re = np.array([np.interp(r, geom.r, F[:, k].real) for k in m])
            im = np.array([np.interp(r, geom.r, F[:, k].imag) for k in m])
            wgt = np.where((m == 0) | ((n_t % 2 == 0) & (m == n_t // 2)), 1.0, 2.0)[:, None]
            mt = m[:, None] * th[None, :]
            return np.sum(wgt * (re * np.cos(mt) - im * np.sin(mt)), axis=0)
        if self.kind == "line":
            return np.interp(pts[:, 0], geom.nodes[:, 0], f)
        if self.kind == "tensor":
            nx, ny = geom.grid_shape
            it = RegularGridInterpolator((geom.x, geom.y), f.reshape(nx, ny), bounds_error=False, fill_value=None)
            return it(pts)
        full = np.zeros(geom.mask.shape)
        full[geom.cells[:, 0], geom.cells[:, 1]] = f
        it = RegularGridInterpolator((geom.cx, geom.cy), full, bounds_error=False, fill_value=0.0)
        return it(pts)


@lru_cache(maxsize=8)
def _cached_field(key):
    return FieldOperator(_geometry_from_descriptor(json.loads(key)))


def build_field_operator(geom: DomainGeometry) -> FieldOperator:
    return _cached_field(json.dumps(geom.descriptor(), sort_keys=True))
