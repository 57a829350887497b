"""Command line front end and experiment catalog.

Every experiment is a catalog entry listing checks; a check names a
registered operation and its parameters.  Reports are written as JSON with
deterministic content (runtimes and timestamps go to a separate file) and
plot data as CSV with a one-line schema header.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bernstein as bn
from . import kernels as kn
from . import mc_oracle as mc
from . import potentials as pt
from . import solvers as sv
from . import spectral_domain as sd

__all__ = ["CATALOG", "Check", "ExperimentConfig", "RunReport", "emit_plot_data", "main", "run"]

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"


# ------------------------------------------------------------------- types


@dataclass
class ExperimentConfig:
    id: str
    phi: str = "stable:0.5"
    domain: str = "disk"
    n_modes: int = 400
    seed: int = 0
    out: str = "out"
    tol: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.id = self.id.upper()
        if self.id not in CATALOG:
            raise KeyError(f"unknown experiment {self.id!r}; known: {', '.join(CATALOG)}")
        bn.parse_phi(self.phi)
        sd.make_domain(self.domain, 1)

    @classmethod
    def from_file(cls, path, **override):
        with open(path) as fh:
            data = json.load(fh)
        data.update({k: v for k, v in override.items() if v is not None})
        return cls(**data)


@dataclass
class Check:
    name: str
    criterion: str
    status: str
    measured: dict
    tolerance: dict
    runtime: float = 0.0

    def to_dict(self):
        return {"name": self.name, "criterion": self.criterion, "status": self.status,
                "measured": _clean(self.measured), "tolerance": _clean(self.tolerance)}


@dataclass
class RunReport:
    experiment: str
    config: dict
    checks: list
    tables: dict = field(default_factory=dict)
    started: float = 0.0

    @property
    def failed(self):
        return any(c.status == FAIL for c in self.checks)

    def to_dict(self):
        return {"experiment": self.experiment, "config": _clean(self.config),
                "checks": [c.to_dict() for c in self.checks], "environment": environment()}

    def timing(self):
        return {"started": self.started, "runtime": {c.criterion + ":" + c.name: c.runtime for c in self.checks}}


def environment():
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "machine": platform.machine()}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def _status(ok):
    return PASS if ok else FAIL


# --------------------------------------------------------------- context


class Context:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.tables = {}
        self._ks = {}

    def tol(self, key, default):
        return float(self.cfg.tol.get(key, default))

    def opt(self, key, default):
        return self.cfg.options.get(key, default)

    def geom(self, domain=None, N=None):
        return sd.make_domain(domain or self.cfg.domain, N or self.cfg.n_modes)

    def ks(self, phi=None, domain=None, N=None):
        phi = phi or self.cfg.phi
        domain = domain or self.cfg.domain
        N = N or self.cfg.n_modes
        key = (phi, domain, N)
        if key not in self._ks:
            self._ks[key] = kn.KernelSet(bn.parse_phi(phi), self.geom(domain, N), N)
        return self._ks[key]

    def s_list(self):
        return self.opt("s_list", [0.3, 0.5, 0.7])


def _timed(fn):
    def wrapper(ctx, **kw):
        t = time.perf_counter()
        out = fn(ctx, **kw)
        dt = time.perf_counter() - t
        for c in out:
            c.runtime = dt / len(out)
        return out

    wrapper.__name__ = fn.__name__
    return wrapper


CHECKS = {}


def register(name):
    def deco(fn):
        CHECKS[name] = _timed(fn)
        return fn

    return deco


# ------------------------------------------------------------------ checks


@register("spectral_inversion")
def _c_inversion(ctx, criterion="C1", runtime_limit=30.0):
    t = time.perf_counter()
    defects = {}
    for s in ctx.s_list():
        defects[f"s={s}"] = kn.verify_spectral_inversion(ctx.ks(f"stable:{s}"), j_max=20)
    el = time.perf_counter() - t
    tol = ctx.tol("inversion", 1e-8)
    ok = max(defects.values()) <= tol
    return [Check("spectral_inversion", criterion, _status(ok), defects, {"max": tol}),
            Check("spectral_inversion_runtime", criterion, _status(el < runtime_limit), {"within_limit": el < runtime_limit},
                  {"seconds": runtime_limit})]


def _pairs(geom, n, rng, sep=0.2, floor=0.2):
    out = []
    while len(out) < n:
        p = kn._interior_samples(geom, 2, rng, floor)
        if np.linalg.norm(p[0] - p[1]) >= sep:
            out.append(p)
    return np.array(out)


@register("two_route")
def _c_two_route(ctx, criterion="C2", s=0.5, runtime_limit=60.0):
    t = time.perf_counter()
    ks = ctx.ks(f"stable:{s}")
    P = _pairs(ks.geom, 10, np.random.default_rng(ctx.cfg.seed))
    a = kn.green_phi(ks, P[:, 0], P[:, 1], "spectral")
    b = kn.green_phi(ks, P[:, 0], P[:, 1], "subordination")
    rel = np.abs(a - b) / np.abs(b)
    el = time.perf_counter() - t
    tol = ctx.tol("two_route", 1e-3)
    return [Check("two_route_agreement", criterion, _status(rel.max() <= tol), {"max_rel": rel.max()}, {"max": tol}),
            Check("two_route_runtime", criterion, _status(el < runtime_limit), {"within_limit": el < runtime_limit},
                  {"seconds": runtime_limit})]


@register("factorization")
def _c_factorization(ctx, criterion="C3"):
    ks = ctx.ks()
    P = _pairs(ks.geom, 10, np.random.default_rng(ctx.cfg.seed + 1), sep=0.1, floor=0.1)
    rep = kn.verify_factorization(ks, P, tol=ctx.tol("factorization", 2e-2))
    return [Check("factorization_modes", criterion, _status(rep.mode_defect <= 1e-12),
                  {"mode_defect": rep.mode_defect}, {"max": 1e-12}),
            Check("factorization_kernel", criterion, _status(rep.max_defect <= ctx.tol("factorization", 2e-2)),
                  {"max_rel": rep.max_defect}, {"max": ctx.tol("factorization", 2e-2)})]


@register("wsc")
def _c_wsc(ctx, criterion="C17"):
    out = {}
    ok = True
    for s in ctx.s_list():
        r = bn.verify_wsc(bn.stable(s))
        out[f"s={s}"] = [r.delta1_hat, r.delta2_hat]
        ok &= abs(r.delta1_hat - s) <= 0.05 and abs(r.delta2_hat - s) <= 0.05
    r = bn.verify_wsc(bn.stable_sum([0.5, 0.5], [0.3, 0.7]))
    out["sum"] = [r.delta1_hat, r.delta2_hat]
    ok2 = r.delta1_hat >= 0.25 and r.delta2_hat <= 0.75
    return [Check("wsc_stable", criterion, _status(ok), out, {"abs": 0.05}),
            Check("wsc_composite", criterion, _status(ok2), {"sum": out["sum"]}, {"delta1_min": 0.25, "delta2_max": 0.75})]


@register("killing")
def _c_killing(ctx, criterion="C4", runtime_limit=120.0):
    t = time.perf_counter()
    rel = {}
    for s in ctx.s_list():
        rel[f"s={s}"] = kn.verify_killing_identity(ctx.ks(f"stable:{s}"))[0]
    el = time.perf_counter() - t
    tol = ctx.tol("killing", 1e-2)
    return [Check("killing_identity", criterion, _status(max(rel.values()) <= tol), rel, {"max": tol}),
            Check("killing_runtime", criterion, _status(el < runtime_limit), {"within_limit": el < runtime_limit},
                  {"seconds": runtime_limit})]


@register("sharp_bands")
def _c_bands(ctx, criterion="C5", N2=900, n=40):
    ks1 = ctx.ks()
    sample = kn.stratified_sample(ks1.geom, n=n, seed=ctx.cfg.seed)
    ks2 = ctx.ks(N=N2)
    floor = 2 * max(ks1.resolution, ks2.resolution)
    r1 = kn.verify_sharp_bounds(ks1, sample, floor=floor)
    r2 = kn.verify_sharp_bounds(ks2, sample, floor=floor)
    checks = []
    rows = []
    for k in r1:
        b1, b2 = r1[k].band, r2[k].band
        ceiling = r1[k].ceiling
        stable = abs(b2 / b1 - 1) <= 0.2
        rows.append([k, b1, b2, r1[k].n_samples])
        checks.append(Check(f"band_{k}", criterion, _status(b1 <= ceiling and b2 <= ceiling and stable),
                            {"band_N1": b1, "band_N2": b2, "excluded_fraction": r1[k].excluded_fraction},
                            {"ceiling": ceiling, "stability": 0.2}))
    ctx.tables["ratio_bands"] = (["kernel", "band_N1", "band_N2", "samples"], rows)
    return checks


@register("boundary_slope")
def _c_slope(ctx, criterion="C6"):
    g = ctx.geom()
    deltas = np.geomspace(0.3 * g.inradius, 3 * g.spacing, 12)
    pts = g.ray(0, deltas)
    slopes = {}
    rows = []
    for s in ctx.s_list():
        ks = ctx.ks(f"stable:{s}")
        v = kn.poisson_sigma(ks, pts)
        slopes[f"s={s}"] = float(np.polyfit(np.log(deltas), np.log(v), 1)[0])
        rows += [[s, d, val] for d, val in zip(deltas[::-1], v[::-1])]
    ok = all(abs(slopes[f"s={s}"] + (2 - 2 * s)) <= 0.15 for s in ctx.s_list())
    ctx.tables["slope"] = (["s", "delta", "poisson_sigma"], rows)
    return [Check("boundary_slope", criterion, _status(ok), slopes,
                  {f"s={s}": [-(2 - 2 * s), 0.15] for s in ctx.s_list()})]


@register("u_profile")
def _c_uprofile(ctx, criterion="C7", s=0.5):
    ks = ctx.ks(f"stable:{s}")
    g = ks.geom
    line = pt._normal_line(g, 0)
    d = g.node_delta[line]
    sel = line[(d >= 2 * g.spacing) & (d <= 0.6 * g.inradius)]
    decades = float(np.log10(g.node_delta[sel].max() / g.node_delta[sel].min()))
    ray = pt.default_ray(g, 0, top=g.inradius / 3)
    out, ok = {}, decades >= 3
    for U in (pt.UProfile(0, 0), pt.UProfile(0.5, 0), pt.UProfile(1.4, 0)):
        lhs, rhs = pt.u_profile_bound(ks, U, sel)
        q = lhs / rhs
        band = float(q.max() / q.min())
        F = pt.green_apply(ks, U(g.node_delta))
        rs = pt.pointwise_boundary_ratio(ks, F, 0, ray)
        decay = float(rs.ratio[-1] / rs.ratio[0])
        out[f"beta={U.beta}"] = {"band": band, "decay": decay}
        ok &= band <= 30 and decay <= 0.05
    out["decades"] = decades
    try:
        pt.u_profile_bound(ks, pt.UProfile(2.5, 0), sel[:1])
        out["beta=2.5"] = "finite"
        ok = False
    except pt.InfiniteProfile:
        out["beta=2.5"] = "infinite"
    return [Check("u_profile", criterion, _status(ok), out, {"band": 30, "decay": 0.05, "decades": 3})]


def _zeta_cos(g):
    return pt.BoundaryMeasure.from_function(g, lambda z: 2 + z[:, 0] / np.hypot(z[:, 0], z[:, 1]))


@register("poisson_trace")
def _c_poisson_trace(ctx, criterion="C8", t=0.01):
    ks = ctx.ks()
    g = ks.geom
    zeta = _zeta_cos(g)
    u = pt.poisson_integral(ks, zeta)
    nb = g.boundary_nodes.shape[0]
    errs = {}
    for k in (0, nb // 8, nb // 4, nb // 2):
        rs = pt.pointwise_boundary_ratio(ks, u, k)
        errs[f"z{k}"] = float(abs(rs.ratio[-1] / zeta.density[k] - 1))
    tests = {"one": lambda X: np.ones(len(X)), "x1sq": lambda X: X[:, 0] ** 2, "shift": lambda X: 1 + X[:, 1]}
    bz = g.boundary_nodes
    weak, rows = {}, []
    for name, tf in tests.items():
        ref = float(np.sum(g.boundary_weights * tf(bz) * zeta.density))
        for tt in (0.2, 0.1, 0.05, 0.02, t):
            val = pt.weak_boundary_trace(ks, u, tt, tf)
            rows.append([name, tt, val, ref])
        weak[name] = abs(val / ref - 1)
    ctx.tables["poisson_trace"] = (["testfn", "t", "trace", "reference"], rows)
    return [Check("pointwise_trace", criterion, _status(max(errs.values()) <= 0.05), errs, {"rel": 0.05}),
            Check("weak_trace", criterion, _status(max(weak.values()) <= 0.05), weak, {"rel": 0.05, "t": t})]


@register("green_trace")
def _c_green_trace(ctx, criterion="C9", t=0.01):
    ks = ctx.ks()
    g = ks.geom
    c = g.nodes.mean(axis=0)
    lam = pt.InteriorMeasure(np.exp(-np.sum((g.nodes - c) ** 2, 1) / (0.1 * g.inradius**2)))
    G = pt.green_potential(ks, lam)
    seq = [(tt, pt.weak_boundary_trace(ks, G, tt), pt.weak_boundary_trace(ks, ks.sigma_field, tt))
           for tt in (0.2, 0.1, 0.05, 0.02, t)]
    final = seq[-1][1] / seq[-1][2]
    decreasing = all(b[1] <= a[1] for a, b in zip(seq, seq[1:]))
    ctx.tables["green_trace"] = (["t", "green_trace", "sigma_trace"], [list(r) for r in seq])
    return [Check("green_trace", criterion, _status(final <= 0.05 and decreasing),
                  {"final_ratio": final, "decreasing": decreasing}, {"max_ratio": 0.05})]


def _random_h(ks, rng):
    spec = ks.spectrum
    co = rng.normal(size=spec.count) / np.arange(1, spec.count + 1)
    return co @ spec.nodal


@register("kato")
def _c_kato(ctx, criterion="C10", n=20):
    ks = ctx.ks()
    rng = np.random.default_rng(ctx.cfg.seed)
    worst = 0.0
    for _ in range(n):
        r = sv.verify_kato(ks, _random_h(ks, rng))
        worst = max(worst, max(r.defect_positive, r.defect_nonnegative) / r.sup_w)
    second = sv.verify_kato(ks, ks.spectrum.nodal[1])
    w2 = max(second.defect_positive, second.defect_nonnegative) / second.sup_w
    return [Check("kato", criterion, _status(max(worst, w2) <= 1e-3),
                  {"max_relative_defect": worst, "second_mode": w2}, {"relative": 1e-3})]


@register("max_principle")
def _c_maxp(ctx, criterion="C16", n=50):
    ks = ctx.ks()
    g = ks.geom
    rng = np.random.default_rng(ctx.cfg.seed)
    viol = 0
    for _ in range(n):
        dens = rng.uniform(0, 1, g.nodes.shape[0]) * (rng.uniform(size=g.nodes.shape[0]) < 0.05)
        zeta = pt.BoundaryMeasure(rng.uniform(0, 1, g.boundary_nodes.shape[0]) ** 3)
        u = sv.solve_linear(sv.ProblemSpec(ks, zeta=zeta, lam=pt.InteriorMeasure(dens))).u
        viol += int(np.sum(u < 0))
    return [Check("max_principle", criterion, _status(viol == 0), {"violations": viol, "pairs": n}, {"violations": 0})]


@register("monotone")
def _c_monotone(ctx, criterion="C11", p=1.5):
    ks = ctx.ks()
    sig = pt.BoundaryMeasure.sigma(ks.geom)
    nl = sv.power_nonlinearity(p, 1.0, 1.0)
    ps = sv.ProblemSpec(ks, nl, sig)
    ratio = sv.certify_monotone(ps)[0]
    ps.nonlinearity = nl.with_m(0.5 / ratio)
    rep = sv.solve_monotone(ps)
    P = ps.P
    band = bool(np.all(rep.u >= -1e-12) and np.all(rep.u <= 2 * P * (1 + 1e-12)))
    ok = rep.converged and rep.iterations <= 200 and rep.residual_sup[-1] <= 1e-8 and \
        rep.diagnostics["min_increment"] >= -1e-12 and band
    ctx.tables["residual_monotone"] = (["iteration", "residual_sup", "residual_l1"],
                                       [[i, a, b] for i, (a, b) in enumerate(zip(rep.residual_sup, rep.residual_l1))])
    return [Check("monotone_solver", criterion, _status(ok),
                  {"m": ps.nonlinearity.m, "iterations": rep.iterations, "residual": rep.residual_sup[-1],
                   "min_increment": rep.diagnostics["min_increment"], "within_0_2P": band},
                  {"residual": 1e-8, "iterations": 200, "increment": -1e-12})]


@register("nonpositive")
def _c_nonpositive(ctx, criterion="C12", p=1.5):
    ks = ctx.ks()
    sig = pt.BoundaryMeasure.sigma(ks.geom)
    ps = sv.ProblemSpec(ks, sv.power_nonlinearity(p, -1.0), sig)
    a = sv.solve_nonpositive(ps, start="poisson")
    b = sv.solve_nonpositive(ps, start="zero")
    width = a.diagnostics.get("bracket_width")
    diff = float(np.max(np.abs(a.u - b.u)))
    ok = a.converged and b.converged and width is not None and width <= 1e-8 and diff <= 1e-6
    return [Check("nonpositive_solver", criterion, _status(ok),
                  {"bracket_width": width, "start_difference": diff, "iterations": a.iterations},
                  {"width": 1e-8, "difference": 1e-6})]


@register("threshold")
def _c_threshold(ctx, criterion="C13", s=0.5, p_list=(1.5, 2.5)):
    fam = sv.refinement_family(bn.stable(s), levels=3, n_r0=40, factor=2.5, n_theta=8)
    res = sv.threshold_experiment(fam, list(p_list))
    rows = res["rows"]
    conv = res["verdict"][1.5] == "CONVERGENT"
    div = res["verdict"][2.5] == "DIVERGENT"
    growth_rows = [r for r in rows if r["p"] == 2.5 and r["classification"] == "DIVERGENT"
                   and all(g >= 2 for g in r["growth"])]
    measured = {f"p={r['p']}:{r['branch']}": {"classification": r["classification"], "reason": r["reason"],
                                              "growth": r["growth"], "boundary_ratio": r["boundary_ratio"]}
                for r in rows}
    ok = conv and div and bool(growth_rows)
    return [Check("threshold", criterion, _status(ok), measured,
                  {"growth_per_refinement": 2.0, "levels": 3, "theory": res["threshold_theory"]})]


@register("signed")
def _c_signed(ctx, criterion="C14"):
    ks = ctx.ks()
    g = ks.geom
    zeta = sv.parse_boundary("cos:0,1", g)
    ps = sv.ProblemSpec(ks, sv.sine_nonlinearity(1.0), zeta)
    rep = sv.solve_signed(ps, seed=ctx.cfg.seed)
    C1, _ = sv.smallness_certificate(ps, seed=ctx.cfg.seed)
    C2, _ = sv.smallness_certificate(ps, seed=ctx.cfg.seed)
    sq = sv.ProblemSpec(ks, sv.square_nonlinearity(1.0), zeta)
    small = [m for m in (1e-3, 1e-2, 1e-1, 1.0, 10.0)
             if sv.smallness_certificate(sv.ProblemSpec(ks, sq.nonlinearity.with_m(m), zeta), ctx.cfg.seed)[0]]
    ok = rep.converged and rep.diagnostics.get("bound_excess", 1.0) <= 0 and C1 == C2
    return [Check("signed_solver", criterion, _status(ok),
                  {"iterations": rep.iterations, "residual": rep.residual_sup[-1], "C": C1,
                   "bound_excess": rep.diagnostics.get("bound_excess"), "reproducible": C1 == C2,
                   "square_certified_m": small}, {"residual": 1e-8})]


@register("mc_green")
def _c_mc(ctx, criterion="C15", s=0.5, paths=100_000, dt=2e-3, runtime_limit=600.0):
    t = time.perf_counter()
    ks = ctx.ks(f"stable:{s}")
    f = lambda X: np.exp(-np.sum(X**2, 1) / (2 * 0.15**2))  # noqa: E731
    z, rows = {}, []
    for i, x in enumerate([(0.3, 0.0), (0.0, 0.5), (-0.4, -0.4)]):
        ref = mc.spectral_green_potential(ks, f, x)
        est = mc.estimate_green_potential(mc.PathConfig(dt=dt, paths=paths, seed=ctx.cfg.seed + i, s=s), ks, x, f, ref)
        z[str(x)] = est.z
        rows.append([x[0], x[1], est.estimate, est.se, ref])
    h = pt.poisson_kernel_field(ks, 0)
    defect, se, est, hx = mc.verify_mean_value(mc.PathConfig(dt=dt, paths=paths, seed=ctx.cfg.seed + 10, s=s),
                                               ks, h, ((0.0, 0.0), 0.5), (0.1, 0.0))
    el = time.perf_counter() - t
    ctx.tables["mc_green"] = (["x1", "x2", "estimate", "se", "reference"], rows)
    return [Check("mc_green", criterion, _status(max(abs(v) for v in z.values()) <= 3), {"z": z}, {"z": 3}),
            Check("mc_mean_value", criterion, _status(defect <= 3 * se), {"defect": defect, "se": se}, {"se": 3}),
            Check("mc_runtime", criterion, _status(el < runtime_limit), {"within_limit": el < runtime_limit},
                  {"seconds": runtime_limit})]


# ----------------------------------------------------------------- catalog

CATALOG = {
    "EXP1": {"title": "spectral identities", "checks": [("spectral_inversion", {}), ("factorization", {}), ("wsc", {})]},
    "EXP2": {"title": "two-route Green agreement", "checks": [("two_route", {})]},
    "EXP3": {"title": "killing identity", "checks": [("killing", {})]},
    "EXP4": {"title": "sharp-bound bands", "checks": [("sharp_bands", {})]},
    "EXP5": {"title": "boundary blow-up and U profiles", "checks": [("boundary_slope", {}), ("u_profile", {})]},
    "EXP6": {"title": "boundary traces", "checks": [("poisson_trace", {}), ("green_trace", {})]},
    "EXP7": {"title": "comparison principles", "checks": [("kato", {}), ("max_principle", {})]},
    "EXP8": {"title": "semilinear solvers",
             "checks": [("monotone", {}), ("nonpositive", {}), ("threshold", {}), ("signed", {})]},
    "EXP9": {"title": "Monte Carlo oracle", "checks": [("mc_green", {})]},
}


def run(cfg: ExperimentConfig, write=True) -> RunReport:
    ctx = Context(cfg)
    started = time.time()
    checks = []
    for op, params in CATALOG[cfg.id]["checks"]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            checks += CHECKS[op](ctx, **params)
    report = RunReport(cfg.id, {k: v for k, v in vars(cfg).items() if k != "out"}, checks, ctx.tables, started)
    if write:
        out = Path(os.environ.get("PHIGREEN_OUT", cfg.out))
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{cfg.id.lower()}_report.json", report.to_dict())
        _write_json(out / f"{cfg.id.lower()}_timing.json", report.timing())
        emit_plot_data(report, out)
    return report


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_plot_data(report: RunReport, out=None):
    """One CSV per table with a schema comment on its first line."""
    out = Path(out or "out")
    paths = []
    for name, (cols, rows) in report.tables.items():
        p = out / f"{report.experiment.lower()}_{name}.csv"
        with open(p, "w") as fh:
            fh.write("# schema: " + ",".join(cols) + "\n")
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) if isinstance(v, (int, float, np.floating)) else str(v) for v in r) + "\n")
        paths.append(p)
    return paths


# --------------------------------------------------------------- commands


def _common(p):
    p.add_argument("--phi", default="stable:0.5")
    p.add_argument("--domain", default="disk")
    p.add_argument("--n-modes", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--tol", type=float, default=None)


def _ks(a):
    return kn.KernelSet(bn.parse_phi(a.phi), sd.make_domain(a.domain, a.n_modes), a.n_modes)


def _outdir(a):
    out = Path(os.environ.get("PHIGREEN_OUT", a.out))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj, path):
    _write_json(path, obj)
    print(json.dumps(_clean(obj), indent=2, sort_keys=True))


def cmd_spectrum(a):
    out = _outdir(a)
    if a.action == "build":
        geom = sd.make_domain(a.domain, a.n_modes)
        spec = sd.build_spectrum(geom, a.n_modes)
        path = Path(a.file) if a.file else out / f"spectrum_{geom.shape}_{a.n_modes}.bin"
        sd.save_spectrum(spec, path)
        _emit({"file": str(path), "N": spec.count, "lam_max": spec.lam_max}, out / "spectrum_build.json")
        return 0
    if a.file:
        spec = sd.load_spectrum(a.file)
    else:
        spec = sd.build_spectrum(sd.make_domain(a.domain, a.n_modes), a.n_modes)
    weyl, hopf = sd.verify_weyl(spec), sd.verify_hopf(spec)
    tol = a.tol if a.tol is not None else 1e-8
    ortho = sd.orthonormality_defect(spec)
    rep = {"orthonormality": ortho, "weyl": [weyl.lower, weyl.upper, weyl.passed],
           "hopf": [hopf.lower, hopf.upper, hopf.passed], "passed": bool(ortho <= tol and weyl.passed and hopf.passed)}
    _emit(rep, out / "spectrum_verify.json")
    return 0 if rep["passed"] else 1


def cmd_kernels(a):
    out = _outdir(a)
    ks = _ks(a)
    rng = np.random.default_rng(a.seed)
    P = _pairs(ks.geom, 10, rng, sep=0.1, floor=0.1)
    inv = kn.verify_spectral_inversion(ks, j_max=20, seed=a.seed)
    fac = kn.verify_factorization(ks, P, tol=a.tol or 2e-2)
    a_ = kn.green_phi(ks, P[:, 0], P[:, 1], "spectral")
    kn.dump_kernel_csv(out / "green_pairs.csv", P[:, 0], P[:, 1], a_, "spectral")
    rep = {"spectral_inversion": inv, "factorization_modes": fac.mode_defect,
           "factorization_kernel": fac.max_defect, "passed": bool(inv <= 1e-8 and fac.passed)}
    _emit(rep, out / "kernels_verify.json")
    return 0 if rep["passed"] else 1


def cmd_potentials(a):
    out = _outdir(a)
    ks = _ks(a)
    g = ks.geom
    if a.action == "trace":
        zeta = sv.parse_boundary(a.zeta, g)
        u = pt.poisson_integral(ks, zeta)
        rs = pt.pointwise_boundary_ratio(ks, u, a.node)
        ref = zeta.nodal(g)[a.node]
        pt.dump_series_csv(out / "pointwise_trace.csv", rs.delta, rs.ratio, ref)
        ts = np.array([0.2, 0.1, 0.05, 0.02, 0.01])
        vals = [pt.weak_boundary_trace(ks, u, t) for t in ts]
        wref = float(np.sum(g.boundary_weights * zeta.nodal(g)))
        pt.dump_series_csv(out / "weak_trace.csv", ts, vals, wref, name="t")
        _emit({"pointwise_last": float(rs.ratio[-1]), "pointwise_reference": float(ref),
               "weak_last": float(vals[-1]), "weak_reference": wref}, out / "potentials_trace.json")
        return 0
    U = pt.UProfile(a.beta, a.r)
    try:
        line = pt._normal_line(g, 0)
        d = g.node_delta[line]
        sel = line[(d >= 2 * g.spacing) & (d <= 0.6 * g.inradius)]
        lhs, rhs = pt.u_profile_bound(ks, U, sel)
    except pt.InfiniteProfile as e:
        _emit({"classification": "infinite", "reason": str(e)}, out / "potentials_profile.json")
        return 0
    pt.dump_series_csv(out / "u_profile.csv", g.node_delta[sel], lhs, rhs)
    q = lhs / rhs
    _emit({"classification": "finite", "band": float(q.max() / q.min()), "flags": U.flags()},
          out / "potentials_profile.json")
    return 0


def cmd_solve(a):
    out = _outdir(a)
    ks = _ks(a)
    g = ks.geom
    nl = sv.parse_nonlinearity(a.f)
    zeta = sv.parse_boundary(a.zeta, g)
    ps = sv.ProblemSpec(ks, nl, zeta, max_iter=a.max_iter, tol=a.tol or 1e-8)
    if a.kind == "linear":
        c = g.nodes.mean(axis=0)
        lam = pt.InteriorMeasure(a.source * np.exp(-np.sum((g.nodes - c) ** 2, 1) / 0.05))
        ps = sv.ProblemSpec(ks, sv.zero_nonlinearity(), zeta, lam)
        rep = sv.solve_linear(ps)
    elif a.kind == "monotone":
        if a.auto_m:
            ps.nonlinearity = nl.with_m(a.auto_m / sv.certify_monotone(sv.ProblemSpec(ks, nl.with_m(1.0), zeta))[0])
        rep = sv.solve_monotone(ps)
    elif a.kind == "nonpositive":
        rep = sv.solve_nonpositive(ps)
    elif a.kind == "signed":
        rep = sv.solve_signed(ps, seed=a.seed)
    else:
        B = np.full(g.nodes.shape[0], a.bound if a.bound is not None else nl.m)
        rep = sv.bracket_solve(ps, -B, B)
    rep.to_json(out / f"solve_{a.kind}.json")
    rep.dump_csv(out / f"solve_{a.kind}_u.csv", g)
    with open(out / f"solve_{a.kind}_residual.csv", "w") as fh:
        fh.write("# schema: iteration,residual_sup,residual_l1\niteration,residual_sup,residual_l1\n")
        for i, (x, y) in enumerate(zip(rep.residual_sup, rep.residual_l1)):
            fh.write(f"{i},{x!r},{y!r}\n")
    print(json.dumps(_clean(rep.to_dict()), indent=2, sort_keys=True))
    return 0 if rep.converged else 1


def cmd_oracle(a):
    out = _outdir(a)
    ks = _ks(a)
    cfg = mc.PathConfig.for_phi(ks.phi, dt=a.dt, paths=a.paths, seed=a.seed)
    x = tuple(float(v) for v in a.x.split(","))
    if a.action == "green":
        f = lambda X: np.exp(-np.sum(X**2, 1) / (2 * 0.15**2))  # noqa: E731
        est = mc.estimate_green_potential(cfg, ks, x, f, mc.spectral_green_potential(ks, f, x))
        est.to_json(out / "oracle_green.json", x=list(x), f_id="gauss0.15")
        print(json.dumps(_clean(est.to_dict()), indent=2, sort_keys=True))
        return 0 if abs(est.z) <= 3 else 1
    h = pt.poisson_kernel_field(ks, a.node)
    defect, se, est, hx = mc.verify_mean_value(cfg, ks, h, ((0.0, 0.0), a.radius), x)
    _emit({"x": list(x), "estimate": est, "reference": hx, "defect": defect, "se": se, "M": a.paths},
          out / "oracle_meanvalue.json")
    return 0 if defect <= 3 * se else 1


def cmd_experiment(a):
    if a.config:
        cfg = ExperimentConfig.from_file(a.config, id=a.id, out=a.out)
    else:
        tol = {} if a.tol is None else {"inversion": a.tol}
        cfg = ExperimentConfig(a.id, a.phi, a.domain, a.n_modes, a.seed, a.out, tol)
    report = run(cfg)
    for c in report.checks:
        print(f"{c.criterion:4s} {c.name:28s} {c.status}")
    return 1 if report.failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="phigreen", description="Kernels, potentials and semilinear solvers.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("spectrum")
    s.add_argument("action", choices=["build", "verify"])
    s.add_argument("--file")
    _common(s)
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("kernels")
    s.add_argument("action", choices=["verify"])
    _common(s)
    s.set_defaults(func=cmd_kernels)

    s = sub.add_parser("potentials")
    s.add_argument("action", choices=["trace", "profile"])
    s.add_argument("--zeta", default="cos:2,1")
    s.add_argument("--node", type=int, default=0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--r", type=float, default=0.0)
    _common(s)
    s.set_defaults(func=cmd_potentials)

    s = sub.add_parser("solve")
    s.add_argument("kind", choices=["linear", "monotone", "nonpositive", "signed", "bracket"])
    s.add_argument("--f", default="zero")
    s.add_argument("--zeta", default="sigma")
    s.add_argument("--source", type=float, default=0.0)
    s.add_argument("--auto-m", type=float, default=None, help="scale m to this fraction of the certified bound")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--bound", type=float, default=None, help="bracket sources -B and B (default: m)")
    _common(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("oracle")
    s.add_argument("action", choices=["green", "meanvalue"])
    s.add_argument("--x", default="0.3,0.0")
    s.add_argument("--paths", type=int, default=100_000)
    s.add_argument("--dt", type=float, default=2e-3)
    s.add_argument("--node", type=int, default=0)
    s.add_argument("--radius", type=float, default=0.5)
    _common(s)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("experiment")
    s.add_argument("action", choices=["run"])
    s.add_argument("id")
    s.add_argument("--config")
    _common(s)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    if a.command == "experiment" and a.id.upper() not in CATALOG:
        parser.error(f"unknown experiment {a.id!r}; choose from {', '.join(CATALOG)}")
    try:
        return a.func(a)
    except sd.CacheError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except sv.PreconditionError as e:
        print(f"precondition failed: {e}", file=sys.stderr)
        return 3
