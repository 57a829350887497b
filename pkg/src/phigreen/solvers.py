"""Linear and semilinear Dirichlet problems for the subordinate operator.

Every solver works on the quadrature nodes with the discrete Green operator
``G`` of the field operator.  ``G`` is entrywise nonnegative and its inverse
``phi(A)`` has nonpositive off-diagonal entries, which is what makes the
comparison arguments (Kato, maximum of subsolutions, monotone iteration)
hold exactly on the grid and not only in the limit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernels import KernelSet
from .potentials import (
    BoundaryMeasure,
    InteriorMeasure,
    delta_norm,
    green_apply,
    green_potential,
    norm_constant,
    poisson_integral,
)
from .spectral_domain import Disk

__all__ = [
    "ConsistencyError",
    "KatoReport",
    "Nonlinearity",
    "PreconditionError",
    "ProblemSpec",
    "SolveReport",
    "bracket_solve",
    "certify_monotone",
    "parse_boundary",
    "parse_nonlinearity",
    "refinement_family",
    "smallness_certificate",
    "solve_linear",
    "solve_monotone",
    "solve_nonpositive",
    "solve_signed",
    "probe_family",
    "threshold_experiment",
    "trace_retention",
    "verify_kato",
    "verify_max_subsolution",
    "weak_defects",
]


class PreconditionError(ValueError):
    """Solver hypotheses fail; ``nodes`` lists the offending node indices."""

    def __init__(self, msg, nodes=None, trace=None):
        super().__init__(msg)
        self.nodes = np.asarray([] if nodes is None else nodes, dtype=np.int64)
        self.trace = trace


class ConsistencyError(RuntimeError):
    """An invariant that holds exactly on the grid was broken beyond roundoff."""


# ------------------------------------------------------------ nonlinearity

_T_LATTICE = np.concatenate([-np.geomspace(1e3, 1e-3, 25), [0.0], np.geomspace(1e-3, 1e3, 25)])


@dataclass
class Nonlinearity:
    """f(x, t) with envelope |f(x, t)| <= m rho(x) Lam(|t|).

    ``base`` takes (nodes, t) with matching leading sizes; ``m`` multiplies
    both ``base`` and the envelope.
    """

    base: Callable
    rho: Callable
    Lam: Callable
    m: float = 1.0
    flags: frozenset = frozenset()
    label: str = "custom"

    def __call__(self, nodes, t):
        return self.m * self.base(nodes, np.asarray(t, dtype=float))

    def envelope(self, nodes, t):
        return self.m * self.rho(nodes) * self.Lam(np.abs(np.asarray(t, dtype=float)))

    def with_m(self, m):
        return Nonlinearity(self.base, self.rho, self.Lam, float(m), self.flags, self.label)

    def doubling_constant(self):
        t = np.geomspace(1e-6, 1e6, 200)
        lo = self.Lam(t)
        ok = lo > 0
        return float(np.max(self.Lam(2 * t)[ok] / lo[ok])) if ok.any() else 1.0

    def check(self, geom, t=None):
        """Sample the envelope and the declared flags on a node x t lattice."""
        t = _T_LATTICE if t is None else np.asarray(t, dtype=float)
        X = geom.nodes
        idx = np.linspace(0, X.shape[0] - 1, min(64, X.shape[0])).astype(int)
        P = X[idx]
        TT = np.broadcast_to(t[None, :], (P.shape[0], t.size))
        XX = np.repeat(P, t.size, axis=0)
        F = self(XX, TT.ravel()).reshape(TT.shape)
        E = self.envelope(XX, TT.ravel()).reshape(TT.shape)
        bad = F.__abs__() > E * (1 + 1e-12) + 1e-300
        if bad.any():
            raise PreconditionError("envelope |f| <= m rho Lam(|t|) violated", idx[np.any(bad, axis=1)])
        problems = []
        if "nonpositive" in self.flags and np.any(F > 0):
            problems.append("nonpositive")
        if "nonnegative" in self.flags and np.any(F < 0):
            problems.append("nonnegative")
        dF = np.diff(F, axis=1)
        scale = 1e-12 * (1 + np.abs(F).max())
        if "nonincreasing" in self.flags and np.any(dF > scale):
            problems.append("nonincreasing")
        if "nondecreasing" in self.flags and np.any(dF < -scale):
            problems.append("nondecreasing")
        if "doubling" in self.flags and not math.isfinite(self.doubling_constant()):
            problems.append("doubling")
        if "sublinear" in self.flags:
            big = np.geomspace(1.0, 1e12, 40)
            q = self.Lam(big) / big
            if np.any(np.diff(q) > 1e-12 * q[0]) or q[-1] > 1e-2 * q[0]:
                problems.append("sublinear")
        if problems:
            raise PreconditionError(f"declared flags fail on the sample lattice: {problems}")
        return True


def _ones(nodes):
    return np.ones(nodes.shape[0])


def power_nonlinearity(p, sign=1.0, m=1.0):
    """sign * (t+)**p: one-signed and monotone in t."""
    p = float(p)
    flags = {"doubling", "nonnegative" if sign > 0 else "nonpositive", "nondecreasing" if sign > 0 else "nonincreasing"}
    if p < 1:
        flags.add("sublinear")
    return Nonlinearity(
        lambda x, t: sign * np.maximum(t, 0.0) ** p,
        _ones,
        lambda t: np.asarray(t, dtype=float) ** p,
        m,
        frozenset(flags),
        f"power:p={p},sign={int(np.sign(sign))},m={m}",
    )


def sine_nonlinearity(m=1.0):
    return Nonlinearity(lambda x, t: np.sin(t), _ones, lambda t: np.ones_like(np.asarray(t, dtype=float)),
                        m, frozenset({"doubling", "sublinear"}), f"sine:m={m}")


def square_nonlinearity(m=1.0):
    return Nonlinearity(lambda x, t: t * t, _ones, lambda t: np.asarray(t, dtype=float) ** 2,
                        m, frozenset({"doubling", "nonnegative"}), f"square:m={m}")


def zero_nonlinearity():
    return Nonlinearity(lambda x, t: np.zeros_like(t), _ones, lambda t: np.zeros_like(np.asarray(t, dtype=float)),
                        0.0, frozenset({"doubling", "nonnegative", "nonpositive", "nondecreasing",
                                        "nonincreasing", "sublinear"}), "zero")


def _kv(text):
    out = {}
    for part in filter(None, text.split(",")):
        k, v = part.split("=")
        out[k.strip()] = float(v)
    return out


def parse_nonlinearity(text):
    """``power:p=1.5,sign=-1,m=0.1``, ``sine:m=1``, ``square:m=0.1`` or ``zero``."""
    kind, _, rest = text.strip().partition(":")
    args = _kv(rest)
    if kind == "power":
        return power_nonlinearity(args.get("p", 1.0), args.get("sign", 1.0), args.get("m", 1.0))
    if kind == "sine":
        return sine_nonlinearity(args.get("m", 1.0))
    if kind == "square":
        return square_nonlinearity(args.get("m", 1.0))
    if kind == "zero":
        return zero_nonlinearity()
    raise ValueError(f"unknown nonlinearity {text!r}")


def parse_boundary(text, geom):
    """``sigma``, ``zero``, ``const:c``, ``cos:a,b`` (a + b cos of the polar angle) or ``point:k``."""
    kind, _, rest = text.strip().partition(":")
    if kind == "sigma":
        return BoundaryMeasure.sigma(geom)
    if kind == "zero":
        return BoundaryMeasure(np.zeros(geom.boundary_nodes.shape[0]))
    if kind == "const":
        return BoundaryMeasure(np.full(geom.boundary_nodes.shape[0], float(rest)))
    if kind == "cos":
        a, b = (float(v) for v in rest.split(","))
        z = geom.boundary_nodes
        if z.shape[1] == 1:
            return BoundaryMeasure(a + b * np.array([1.0, -1.0]))
        c = geom.nodes.mean(axis=0)
        th = np.arctan2(z[:, 1] - c[1], z[:, 0] - c[0])
        return BoundaryMeasure(a + b * np.cos(th))
    if kind == "point":
        return BoundaryMeasure.point_mass(int(rest))
    raise ValueError(f"unknown boundary datum {text!r}")


# ------------------------------------------------------------------ problem


@dataclass
class ProblemSpec:
    ks: KernelSet
    nonlinearity: Nonlinearity = field(default_factory=zero_nonlinearity)
    zeta: BoundaryMeasure | None = None
    lam: InteriorMeasure | None = None
    max_iter: int = 200
    theta: float = 1.0
    tol: float = 1e-8
    tol_l1: float = 1e-6

    def __post_init__(self):
        g = self.ks.geom
        if self.zeta is None:
            self.zeta = BoundaryMeasure(np.zeros(g.boundary_nodes.shape[0]))
        if not np.isfinite(self.zeta.total_variation(g)):
            raise PreconditionError("boundary datum has infinite total variation")
        if self.lam is not None:
            self.lam.validate(g)
        self._P = None

    @property
    def geom(self):
        return self.ks.geom

    @property
    def P(self):
        if self._P is None:
            self._P = poisson_integral(self.ks, self.zeta)
        return self._P

    @property
    def interior(self):
        g = self.geom
        return g.node_delta > 2 * g.spacing

    def f_of(self, u):
        with np.errstate(over="ignore", invalid="ignore"):
            return self.nonlinearity(self.geom.nodes, u)

    def G(self, f):
        return green_apply(self.ks, f)

    def T(self, u):
        """Fixed-point map u -> G f(u) + P."""
        with np.errstate(over="ignore", invalid="ignore"):
            return self.G(self.f_of(u)) + self.P

    def residual(self, u):
        """(interior sup norm, weighted L1 norm) of u - G f_u - P."""
        r = u - self.T(u)
        return float(np.max(np.abs(r[self.interior]))), delta_norm(self.geom, r)


@dataclass
class SolveReport:
    u: np.ndarray
    iterations: int
    residual_sup: list
    residual_l1: list
    converged: bool
    classification: str
    diagnostics: dict = field(default_factory=dict)
    f_u: np.ndarray | None = None

    def weighted_f_norm(self, geom):
        return delta_norm(geom, self.f_u) if self.f_u is not None else 0.0

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "classification": self.classification,
            "residual_sup": [float(v) for v in self.residual_sup],
            "residual_l1": [float(v) for v in self.residual_l1],
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def dump_csv(self, path, geom):
        with open(path, "w") as fh:
            cols = [f"x{i + 1}" for i in range(geom.dim)]
            fh.write(",".join(cols + ["delta", "u"]) + "\n")
            for x, d, v in zip(geom.nodes, geom.node_delta, self.u):
                fh.write(",".join(repr(float(c)) for c in (*x, d, v)) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _finish(ps, u, it, hs, hl, converged, diag, classification=None):
    rs, rl = ps.residual(u)
    hs.append(rs)
    hl.append(rl)
    ok = converged and rs <= ps.tol and rl <= ps.tol_l1
    cls = classification or ("CONVERGENT" if ok else "INCONCLUSIVE")
    return SolveReport(u, it, hs, hl, ok, cls, diag, ps.f_of(u))


# ------------------------------------------------------------------ linear


def solve_linear(ps: ProblemSpec):
    """u = G lam + P zeta by superposition."""
    u = ps.P.copy()
    if ps.lam is not None:
        u += green_potential(ps.ks, ps.lam)
    C = norm_constant(ps.ks, u, ps.lam, ps.zeta)
    r = np.zeros(1)
    return SolveReport(u, 1, [0.0], [0.0], bool(np.all(np.isfinite(u))), "CONVERGENT",
                       {"norm_constant": C, "residual": float(r[0])}, np.zeros_like(u))


# ---------------------------------------------------------------- monotone


def certify_monotone(ps: ProblemSpec):
    """Max over nodes of G(m rho Lam(2 P)) / P; the precondition holds iff this is <= 1."""
    P = ps.P
    E = ps.G(ps.nonlinearity.envelope(ps.geom.nodes, 2 * P))
    ratio = E / np.where(P > 0, P, np.nan)
    return float(np.nanmax(ratio)), ratio


def solve_monotone(ps: ProblemSpec, certify=True):
    """Monotone iteration from zero for nonnegative nondecreasing f and nonnegative zeta.

    With ``certify=False`` the precondition is only recorded; growth past
    ``2 P`` or loss of finiteness is then reported as DIVERGENT instead of
    raising.
    """
    nl = ps.nonlinearity
    nl.check(ps.geom)
    if not {"nonnegative", "nondecreasing"} <= nl.flags:
        raise PreconditionError("monotone iteration needs f >= 0 and nondecreasing in t")
    if np.any(ps.zeta.nodal(ps.geom) < 0):
        raise PreconditionError("boundary datum must be nonnegative")
    P = ps.P
    worst, ratio = certify_monotone(ps)
    certified = worst <= 1 + 1e-12
    if certify and not certified:
        raise PreconditionError(f"precondition G(rho Lam(2P)) <= P fails (max ratio {worst:.3g})",
                                np.nonzero(ratio > 1 + 1e-12)[0])
    u = np.zeros_like(P)
    hs, hl = [], []
    min_step = math.inf
    cls = None
    for it in range(1, ps.max_iter + 1):
        new = ps.T(u)
        if not np.all(np.isfinite(new)):
            cls = "DIVERGENT"
            break
        step = new - u
        scale = 1e-12 * max(1.0, float(np.max(np.abs(new))))
        min_step = min(min_step, float(step.min()))
        if step.min() < -scale:
            raise ConsistencyError(f"monotone iterates decreased by {-step.min():.3g} at step {it}")
        if np.any(new > 2 * P + scale):
            if certified:
                raise ConsistencyError(f"iterate exceeded 2P at step {it}")
            cls = "DIVERGENT"
        u = new
        rs = float(np.max(np.abs(step[ps.interior])))
        hs.append(rs)
        hl.append(delta_norm(ps.geom, step))
        if rs <= ps.tol * 1e-2 and hl[-1] <= ps.tol_l1 * 1e-2:
            break
    diag = {"precondition_ratio": worst, "certified": certified, "min_increment": min_step,
            "upper_ratio": float(np.max(u[P > 0] / P[P > 0]))}
    if cls == "DIVERGENT" and not np.all(np.isfinite(u)):
        return SolveReport(u, it, hs, hl, False, cls, diag, ps.f_of(u))
    return _finish(ps, u, it, hs, hl, cls is None, diag, cls)


def trace_retention(ps: ProblemSpec, u):
    """Smallest ratio u / P zeta over the nodes nearest the boundary."""
    g = ps.geom
    ring = g.node_delta <= g.node_delta.min() * (1 + 1e-9)
    P = ps.P[ring]
    ok = P > 0
    return float(np.min(u[ring][ok] / P[ok])) if ok.any() else math.nan


# ------------------------------------------------------------- nonpositive


def _damped(ps, u, it0, hs, hl, theta=1.0, floor=1 / 64, patience=10, project=None):
    """Damped Picard iteration; theta halves whenever the residual grows."""
    r = u - ps.T(u)
    cur = float(np.max(np.abs(r[ps.interior])))
    stuck = 0
    it = it0
    while it < ps.max_iter:
        it += 1
        cand = u - theta * r
        if project is not None:
            cand = project(cand)
        rc = cand - ps.T(cand)
        nxt = float(np.max(np.abs(rc[ps.interior])))
        hs.append(nxt)
        hl.append(delta_norm(ps.geom, rc))
        if nxt > cur:
            if theta > floor:
                theta = max(theta / 2, floor)
            else:
                stuck += 1
                if stuck >= patience:
                    return cand, it, "DIVERGENT", theta
        else:
            stuck = 0
        u, r, cur = cand, rc, nxt
        if not np.all(np.isfinite(u)):
            return u, it, "DIVERGENT", theta
        if cur <= ps.tol * 1e-2 and hl[-1] <= ps.tol_l1 * 1e-2:
            return u, it, None, theta
    return u, it, "INCONCLUSIVE", theta


def solve_nonpositive(ps: ProblemSpec, start="poisson"):
    """Alternating bracket iteration for f <= 0; damped fallback otherwise."""
    nl = ps.nonlinearity
    nl.check(ps.geom)
    if "nonpositive" not in nl.flags:
        raise PreconditionError("f must be nonpositive")
    zeros = np.zeros(1)
    if np.any(nl(ps.geom.nodes[:1], zeros) != 0):
        raise PreconditionError("f(x, 0) must vanish")
    if np.any(ps.zeta.nodal(ps.geom) < 0):
        raise PreconditionError("boundary datum must be nonnegative")
    P = ps.P
    env = nl.envelope(ps.geom.nodes, P)
    if not np.isfinite(delta_norm(ps.geom, env)):
        raise PreconditionError("rho Lam(P zeta) has infinite weighted norm")
    u = P.copy() if start == "poisson" else (np.zeros_like(P) if start == "zero" else np.asarray(start, float))
    hs, hl = [], []
    diag = {"start": start if isinstance(start, str) else "custom"}
    it = 0
    cls = None
    if "nonincreasing" in nl.flags:
        hi, lo = None, None
        widths = []
        # the map is decreasing, so iterates alternate sides; the first step fixes which side is which
        hi_parity = None
        for it in range(1, ps.max_iter + 1):
            prev = u
            u = ps.T(u)
            if not np.all(np.isfinite(u)):
                cls = "DIVERGENT"
                break
            if hi_parity is None:
                hi_parity = 0 if np.sum(u - prev) <= 0 else 1
            if it % 2 != hi_parity:
                lo_new = u
                if lo is not None and np.any(lo_new < lo - 1e-12 * (1 + np.abs(lo))):
                    raise ConsistencyError("lower iterates must increase")
                lo = lo_new
            else:
                hi_new = u
                if hi is not None and np.any(hi_new > hi + 1e-12 * (1 + np.abs(hi))):
                    raise ConsistencyError("upper iterates must decrease")
                hi = hi_new
            if hi is None or lo is None:
                continue
            gap = hi - lo
            if np.any(gap < -1e-12 * (1 + np.abs(hi))):
                raise ConsistencyError("bracket inverted: lower iterate above upper iterate")
            w = float(np.max(gap[ps.interior]))
            widths.append(w)
            hs.append(w)
            hl.append(delta_norm(ps.geom, gap))
            if w <= ps.tol * 1e-2 and hl[-1] <= ps.tol_l1 * 1e-2:
                u = 0.5 * (hi + lo)
                break
            if len(widths) > 20 and widths[-1] > 0.95 * widths[-11]:
                diag["bracket_stalled_at"] = it
                u = 0.5 * (hi + lo)
                u, it, cls, theta = _damped(ps, u, it, hs, hl)
                diag["theta"] = theta
                break
        diag["bracket_width"] = widths[-1] if widths else None
    else:
        u, it, cls, theta = _damped(ps, u, it, hs, hl)
        diag["theta"] = theta
    rep = _finish(ps, u, it, hs, hl, cls is None, diag, cls)
    if rep.converged:
        slack = 1e-9 * (1 + np.abs(P))
        if np.any(u < -slack) or np.any(u > P + slack):
            raise ConsistencyError("solution left the band 0 <= u <= P zeta")
    return rep


# ------------------------------------------------------------------ signed


def smallness_certificate(ps: ProblemSpec, seed=0, grid=None):
    """Search C > 0 with m (r_rho Lam(2C) + r_zeta) <= C.

    Returns (C or None, trace) where trace lists (C, lhs) pairs tested.  The
    log grid is jittered by a seeded shift so repeated runs are reproducible.
    """
    nl = ps.nonlinearity
    g = ps.geom
    r_rho = float(np.max(ps.G(nl.rho(g.nodes))))
    Pabs = poisson_integral(ps.ks, BoundaryMeasure(np.abs(ps.zeta.nodal(g))))
    r_zeta = float(np.max(ps.G(nl.rho(g.nodes) * nl.Lam(2 * Pabs))))
    rng = np.random.default_rng(seed)
    shift = rng.uniform(0, 1) * np.log(10) / 8
    grid = np.exp(np.log(np.geomspace(1e-8, 1e12, 161)) + shift) if grid is None else np.asarray(grid)
    trace = []
    for C in grid:
        lhs = nl.m * (r_rho * float(nl.Lam(np.array(2 * C))) + r_zeta)
        trace.append((float(C), lhs))
        if lhs <= C:
            return float(C), {"trace": trace, "r_rho": r_rho, "r_zeta": r_zeta}
    return None, {"trace": trace, "r_rho": r_rho, "r_zeta": r_zeta}


def solve_signed(ps: ProblemSpec, seed=0):
    """Damped Picard iteration on v = u - P zeta for signed data."""
    nl = ps.nonlinearity
    nl.check(ps.geom)
    g = ps.geom
    C, info = smallness_certificate(ps, seed)
    if C is None and "sublinear" not in nl.flags:
        raise PreconditionError("no admissible C in the smallness search", trace=info["trace"])
    P = ps.P
    u = P.copy()
    hs, hl = [], []
    u, it, cls, theta = _damped(ps, u, 0, hs, hl)
    diag = {"certificate_C": C, "r_rho": info["r_rho"], "r_zeta": info["r_zeta"], "theta": theta, "seed": seed}
    rep = _finish(ps, u, it, hs, hl, cls is None, diag, cls)
    if rep.converged and C is not None:
        Pabs = poisson_integral(ps.ks, BoundaryMeasure(np.abs(ps.zeta.nodal(g))))
        excess = float(np.max(np.abs(u) - C - Pabs))
        diag["bound_excess"] = excess
        if excess > 1e-9 * (1 + C):
            raise ConsistencyError("|u| exceeded C + P|zeta|")
    return rep


# ----------------------------------------------------------------- bracket


def bracket_solve(ps: ProblemSpec, h_lo, h_hi):
    """Sub/supersolution iteration with the nonlinearity clamped to the bracket."""
    g = ps.geom
    P = ps.P
    lo = ps.G(np.asarray(h_lo, float)) + P
    hi = ps.G(np.asarray(h_hi, float)) + P
    tol = 1e-12 * (1 + np.abs(hi))
    bad = np.nonzero(lo > hi + tol)[0]
    if bad.size:
        raise PreconditionError("subsolution above supersolution", bad)
    bad = np.nonzero(np.asarray(h_lo) > ps.f_of(lo) + 1e-12 * (1 + np.abs(h_lo)))[0]
    if bad.size:
        raise PreconditionError("h_lo <= f(., lower) fails", bad)
    bad = np.nonzero(ps.f_of(hi) > np.asarray(h_hi) + 1e-12 * (1 + np.abs(h_hi)))[0]
    if bad.size:
        raise PreconditionError("f(., upper) <= h_hi fails", bad)
    env = ps.nonlinearity.envelope(g.nodes, np.maximum(np.abs(lo), np.abs(hi)))
    if not np.isfinite(delta_norm(g, env)):
        raise PreconditionError("envelope of the bracket has infinite weighted norm")

    def project(v):
        return np.clip(v, lo, hi)

    u = project(0.5 * (lo + hi))
    hs, hl = [], []
    u, it, cls, theta = _damped(ps, u, 0, hs, hl, project=project)
    diag = {"theta": theta, "bracket_width": float(np.max((hi - lo)[ps.interior]))}
    rep = _finish(ps, u, it, hs, hl, cls is None, diag, cls)
    rep.diagnostics["inside_bracket"] = bool(np.all(u >= lo - tol) and np.all(u <= hi + tol))
    return rep


# ---------------------------------------------------------------- checks


def probe_family(geom, n=10, seed=0, degree=2):
    """Nonnegative smooth test functions: squared random polynomial times a cutoff in delta."""
    rng = np.random.default_rng(seed)
    X = geom.nodes
    c = X.mean(axis=0)
    Y = (X - c) / max(geom.inradius, 1e-12)
    d0 = 0.15 * geom.inradius
    d = geom.node_delta
    cut = np.where(d > d0, np.exp(-d0 / np.maximum(d - d0, 1e-300)), 0.0)
    out = []
    for _ in range(n):
        q = rng.normal(size=(degree + 1,) * geom.dim)
        poly = np.zeros(X.shape[0])
        for idx in np.ndindex(q.shape):
            poly += q[idx] * np.prod([Y[:, k] ** idx[k] for k in range(geom.dim)], axis=0)
        out.append(poly**2 * cut)
    return out


def _pair(ks, a, b):
    return float(np.sum(ks.field.mass * a * b))


def weak_defects(ps: ProblemSpec, u, family=None):
    """Per test function: <u, phi(A) psi> - <f_u, psi> - <P, phi(A) psi>, relative to the largest term."""
    ks = ps.ks
    family = probe_family(ps.geom) if family is None else family
    fu = ps.f_of(u)
    out = []
    for psi in family:
        Lpsi = ks.field.apply(ks.symbol, psi)
        a, b, c = _pair(ks, u, Lpsi), _pair(ks, fu, psi), _pair(ks, ps.P, Lpsi)
        out.append((a - b - c) / max(abs(a), abs(b), abs(c), 1e-300))
    return np.array(out)


@dataclass
class KatoReport:
    defect_positive: float
    defect_nonnegative: float
    sup_w: float
    tol: float

    @property
    def passed(self):
        return max(self.defect_positive, self.defect_nonnegative) <= self.tol * self.sup_w

    def to_dict(self):
        return {"defect_positive": self.defect_positive, "defect_nonnegative": self.defect_nonnegative,
                "sup_w": self.sup_w, "tol": self.tol, "passed": self.passed}


def verify_kato(ks: KernelSet, h, tol=1e-3):
    """w = G h; max of w+ - G[1_{w>0} h] and of the variant with {w >= 0}."""
    h = np.asarray(h, dtype=float)
    w = green_apply(ks, h)
    wp = np.maximum(w, 0.0)
    d1 = float(np.max(wp - green_apply(ks, np.where(w > 0, h, 0.0))))
    d2 = float(np.max(wp - green_apply(ks, np.where(w >= 0, h, 0.0))))
    return KatoReport(max(d1, 0.0), max(d2, 0.0), float(np.max(np.abs(w))), tol)


def verify_max_subsolution(ks: KernelSet, u, v, ps: ProblemSpec, family=None, tol=1e-3):
    """Subsolution inequality for max(u, v) tested against nonnegative test functions.

    Returns the largest relative excess of lhs over rhs (nonpositive means pass)
    and the pass flag.
    """
    w = np.maximum(u, v)
    family = probe_family(ks.geom) if family is None else family
    fw = ps.f_of(w)
    worst = -math.inf
    for psi in family:
        Lpsi = ks.field.apply(ks.symbol, psi)
        lhs = _pair(ks, w, Lpsi)
        rhs = _pair(ks, fw, psi) + _pair(ks, ps.P, Lpsi)
        worst = max(worst, (lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return {"max_relative_excess": worst, "passed": worst <= tol}


# --------------------------------------------------------------- threshold


def refinement_family(phi, levels=3, n_r0=40, factor=2.5, n_theta=8, N=16):
    """Kernel sets on disks refined in the radial direction only."""
    out = []
    for k in range(levels):
        g = Disk(int(round(n_r0 * factor**k)), n_theta)
        out.append(KernelSet(phi, g, N, point_factor=1, mean_count=0))
    return out


def _classify(norms, statuses, retention=None, stable=0.2, growth=2.0, loss=0.8):
    """CONVERGENT, DIVERGENT or INCONCLUSIVE from per-level runs.

    Divergence: any run blew up, the weighted norm of f_u grew by ``growth``
    at every refinement, or the solutions shed their boundary datum (the
    boundary ratio shrank by the factor ``loss`` at every refinement).
    """
    if any(s == "DIVERGENT" for s in statuses):
        return "DIVERGENT", "blow-up"
    ratios = [b / a for a, b in zip(norms, norms[1:]) if a > 0]
    if ratios and all(r >= growth for r in ratios):
        return "DIVERGENT", "norm growth"
    if retention is not None:
        rr = [b / a for a, b in zip(retention, retention[1:]) if a > 0]
        if rr and all(r <= loss for r in rr):
            return "DIVERGENT", "boundary datum lost"
    if all(s == "CONVERGENT" for s in statuses) and all(abs(r - 1) <= stable for r in ratios):
        if retention is None or all(b >= a - 0.02 for a, b in zip(retention, retention[1:])):
            return "CONVERGENT", "stable"
    return "INCONCLUSIVE", "no clear trend"


def threshold_experiment(ks_family, p_list, zeta="sigma", m=None, monotone=True):
    """Classify f = -t^p and f = +m t^p over a refinement family.

    The coupling ``m`` of the monotone branch defaults to half the value that
    certifies the coarsest level and is then held fixed; finer levels run
    uncertified so that their actual iterates are measured.  Returns one row
    per (p, branch) with the weighted norms of f_u, their growth factors,
    the boundary ratios, run statuses and the classification.
    """
    s = ks_family[0].phi.index
    rows = []
    for p in p_list:
        branches = [("nonpositive", -1.0)] + ([("monotone", 1.0)] if monotone else [])
        for name, sign in branches:
            norms, statuses, retention = [], [], []
            mm = m
            for ks in ks_family:
                z = parse_boundary(zeta, ks.geom) if isinstance(zeta, str) else zeta
                nl = power_nonlinearity(p, sign, 1.0)
                ps = ProblemSpec(ks, nl, z, max_iter=400)
                if name == "nonpositive":
                    rep = solve_nonpositive(ps)
                else:
                    if mm is None:
                        mm = 0.5 / certify_monotone(ps)[0]
                    ps.nonlinearity = nl.with_m(mm)
                    rep = solve_monotone(ps, certify=False)
                statuses.append(rep.classification)
                norms.append(rep.weighted_f_norm(ks.geom) if np.all(np.isfinite(rep.u)) else math.inf)
                retention.append(trace_retention(ps, rep.u))
            cls, reason = _classify(norms, statuses, retention if name == "nonpositive" else None)
            rows.append({
                "p": float(p), "branch": name, "m": mm if name == "monotone" else 1.0, "norms": norms,
                "growth": [b / a if a > 0 else math.inf for a, b in zip(norms, norms[1:])],
                "boundary_ratio": retention, "statuses": statuses,
                "classification": cls, "reason": reason,
                "spacing": [ks.geom.spacing for ks in ks_family],
            })
    verdict = {}
    for p in p_list:
        cl = [r["classification"] for r in rows if r["p"] == float(p)]
        verdict[float(p)] = ("DIVERGENT" if "DIVERGENT" in cl else
                             "CONVERGENT" if all(c == "CONVERGENT" for c in cl) else "INCONCLUSIVE")
    conv = [p for p, c in verdict.items() if c == "CONVERGENT"]
    div = [p for p, c in verdict.items() if c == "DIVERGENT"]
    return {
        "rows": rows,
        "verdict": verdict,
        "threshold_theory": 1.0 / (1.0 - s) if s is not None else None,
        "threshold_signed_theory": s / (1.0 - s) if s is not None else None,
        "empirical_bracket": [max(conv) if conv else None, min(div) if div else None],
    }
