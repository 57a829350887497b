"""Monte Carlo oracle: Brownian motion killed on leaving the domain, run with a stable clock.

Paths are simulated in the operational time of the subordinate process.  On
each step a stable increment of the subordinator is drawn and the killed
Brownian motion is advanced by that much intrinsic time, in substeps whose
variance never exceeds ``(delta / 4)**2`` at the current position.  Paths are
killed when a substep lands outside the domain or inside a thin shell of
width ``eps`` along the boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import bernstein as bn
from .kernels import KernelSet
from .spectral_domain import coefficients

__all__ = [
    "MCEstimate",
    "PathConfig",
    "estimate_green_potential",
    "exit_time_distribution",
    "sample_subordinator",
    "spectral_green_potential",
    "verify_mean_value",
]


@dataclass(frozen=True)
class PathConfig:
    """Time step, horizon, path count, seed and stable index of the clock."""

    dt: float = 2e-3
    horizon: float = 20.0
    paths: int = 100_000
    seed: int = 0
    s: float = 0.5
    eps: float = 1e-3
    substep: float = 0.25
    chunk: int = 25_000

    def __post_init__(self):
        if not self.dt > 0 or self.paths < 1:
            raise ValueError("need dt > 0 and at least one path")
        if not 0 < self.s < 1:
            raise ValueError("stable index must lie in (0, 1)")

    @classmethod
    def for_phi(cls, phi, **kw):
        if phi.kind != "stable":
            raise NotImplementedError("only stable subordinators can be sampled exactly")
        return cls(s=float(phi.index), **kw)


@dataclass
class MCEstimate:
    estimate: float
    se: float
    paths: int
    truncated: float
    reference: float | None = None

    @property
    def z(self):
        if self.reference is None or self.se == 0:
            return math.nan
        return (self.estimate - self.reference) / self.se

    def to_dict(self):
        d = asdict(self)
        d["z"] = self.z
        return d

    def to_json(self, path, **extra):
        with open(path, "w") as fh:
            json.dump({**self.to_dict(), **extra}, fh, indent=2, sort_keys=True)


def sample_subordinator(cfg: PathConfig, size, rng=None):
    """Stable increments with E exp(-lam X) = exp(-dt lam**s).

    Kanter's form of the Chambers-Mallows-Stuck transform:
    X = dt**(1/s) sin(sU) / sin(U)**(1/s) * (sin((1-s)U) / E)**((1-s)/s).
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    s = cfg.s
    U = rng.uniform(0.0, math.pi, size)
    E = rng.exponential(1.0, size)
    X = np.sin(s * U) / np.sin(U) ** (1 / s) * (np.sin((1 - s) * U) / E) ** ((1 - s) / s)
    return cfg.dt ** (1 / s) * X


def _advance(geom, X, alive, inc, rng, cfg):
    """Run Brownian motion (generator Laplacian) for intrinsic time ``inc`` with killing."""
    rest = np.where(alive, inc, 0.0)
    act = alive & (rest > 0)
    while act.any():
        idx = np.nonzero(act)[0]
        d = geom.delta(X[idx])
        h = np.minimum(rest[idx], (cfg.substep * d) ** 2)
        X[idx] += np.sqrt(2 * h)[:, None] * rng.standard_normal((idx.size, X.shape[1]))
        rest[idx] -= h
        dead = geom.delta(X[idx]) <= cfg.eps
        alive[idx[dead]] = False
        rest[idx[dead]] = 0.0
        act = alive & (rest > 1e-300)
    return X, alive


def _start(geom, x, n):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if geom.delta(x[None, :])[0] <= 0:
        raise ValueError("starting point must be interior")
    return np.repeat(x[None, :], n, axis=0)


def _chunks(cfg):
    ss = np.random.SeedSequence(cfg.seed)
    n_chunks = -(-cfg.paths // cfg.chunk)
    for k, child in enumerate(ss.spawn(n_chunks)):
        yield min(cfg.chunk, cfg.paths - k * cfg.chunk), np.random.default_rng(child)


def estimate_green_potential(cfg: PathConfig, ks: KernelSet, x, f, reference=None):
    """Estimate of E_x of the integral of f(X_t) over the lifetime, with its standard error.

    ``f`` maps an (n, d) array of points to n values.  The occupation
    integral uses the trapezoid rule on the operational time grid.
    """
    geom = ks.geom
    total = []
    truncated = 0
    n_steps = int(math.ceil(cfg.horizon / cfg.dt))
    for n, rng in _chunks(cfg):
        X = _start(geom, x, n)
        alive = np.ones(n, dtype=bool)
        acc = np.zeros(n)
        fx = f(X)
        for _ in range(n_steps):
            if not alive.any():
                break
            inc = sample_subordinator(cfg, n, rng)
            X, alive = _advance(geom, X, alive, inc, rng, cfg)
            fn = np.zeros(n)
            if alive.any():
                fn[alive] = f(X[alive])
            acc += 0.5 * cfg.dt * (fx + fn)
            fx = fn
        truncated += int(alive.sum())
        total.append(acc)
    vals = np.concatenate(total)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return MCEstimate(float(vals.mean()), se, int(vals.size), truncated / vals.size, reference)


def spectral_green_potential(ks: KernelSet, f, x):
    """Reference value of G f(x) from the first N eigenpairs."""
    spec = ks.spectrum
    c, _ = coefficients(spec, f(ks.geom.nodes))
    vals = spec.evaluate(np.atleast_2d(np.asarray(x, dtype=float)))[:, 0]
    return float(np.sum(c / bn.phi_eval(ks.phi, spec.eigenvalues) * vals))


def exit_time_distribution(cfg: PathConfig, ks: KernelSet, x, times):
    """Empirical P_x(lifetime <= t) at the given operational times."""
    geom = ks.geom
    times = np.sort(np.asarray(times, dtype=float))
    died = np.zeros(times.size)
    total = 0
    n_steps = int(math.ceil(times[-1] / cfg.dt))
    grid = cfg.dt * np.arange(1, n_steps + 1)
    for n, rng in _chunks(cfg):
        X = _start(geom, x, n)
        alive = np.ones(n, dtype=bool)
        death = np.full(n, np.inf)
        for k in range(n_steps):
            if not alive.any():
                break
            was = alive.copy()
            X, alive = _advance(geom, X, alive, sample_subordinator(cfg, n, rng), rng, cfg)
            death[was & ~alive] = grid[k]
        died += (death[None, :] <= times[:, None]).sum(axis=1)
        total += n
    return died / total


def verify_mean_value(cfg: PathConfig, ks: KernelSet, h, ball, x, max_steps=None):
    """(|E_x h(X at exit from ball) - h(x)|, standard error, estimate, h(x)).

    ``h`` is a node function; ``ball = (center, radius)`` must lie inside the
    domain.  The exit state is the first grid-time position outside the
    ball; paths that leave the domain contribute zero.
    """
    geom = ks.geom
    c, rad = np.asarray(ball[0], dtype=float), float(ball[1])
    if geom.delta(c[None, :])[0] <= rad:
        raise ValueError("ball must be compactly contained in the domain")
    x = np.asarray(x, dtype=float)
    if np.linalg.norm(x - c) >= rad:
        raise ValueError("start must lie inside the ball")
    hx = float(ks.field.interpolate(h, x[None, :])[0])
    n_steps = int(math.ceil(cfg.horizon / cfg.dt)) if max_steps is None else max_steps
    vals = []
    for n, rng in _chunks(cfg):
        X = _start(geom, x, n)
        alive = np.ones(n, dtype=bool)
        inside = np.ones(n, dtype=bool)
        out = np.zeros(n)
        for _ in range(n_steps):
            run = alive & inside
            if not run.any():
                break
            sub_alive = run.copy()
            X, sub_alive = _advance(geom, X, sub_alive, sample_subordinator(cfg, n, rng), rng, cfg)
            alive[run & ~sub_alive] = False
            left = run & sub_alive & (np.linalg.norm(X - c, axis=1) >= rad)
            if left.any():
                out[left] = ks.field.interpolate(h, X[left])
                inside[left] = False
        vals.append(out)
    v = np.concatenate(vals)
    est = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    return abs(est - hx), se, est, hx
