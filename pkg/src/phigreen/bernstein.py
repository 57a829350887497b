"""Complete Bernstein functions with zero drift.

A spec describes the Laplace exponent ``phi`` of a subordinator.  Besides
evaluation and differentiation the module provides the Levy density ``mu``,
the potential density ``u`` (whose Laplace transform is ``1/phi``), the
conjugate ``lam / phi(lam)`` and an empirical check of the weak scaling
condition at infinity.

Catalog kinds
-------------
``stable``      phi(lam) = lam**s, 0 < s < 1
``stable_sum``  phi(lam) = sum_i w_i lam**s_i
``log_stable``  phi(lam) = lam**s * log(1 + lam)**r, 0 < s < 1, 0 < s + r < 1
``tabulated``   log-log monotone interpolation of sampled values
``conjugate``   lam / base(lam) for a catalog base
``identity``    phi(lam) = lam, the Brownian limit; only a guard for checks
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import mpmath as mp
import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import gamma

__all__ = [
    "BernsteinSpec",
    "ConjugatePair",
    "DomainError",
    "InversionError",
    "Scaling",
    "ScalingReport",
    "conjugate",
    "from_text",
    "identity",
    "invert_laplace",
    "levy_bound",
    "levy_density",
    "levy_tail",
    "log_stable",
    "parse_phi",
    "phi_eval",
    "phi_prime",
    "potential_bound",
    "potential_density",
    "stable",
    "stable_sum",
    "tabulated",
    "to_text",
    "verify_wsc",
    "with_scaling",
]

KINDS = ("stable", "stable_sum", "log_stable", "tabulated", "conjugate", "identity")
BOUND_CONSTANT = 1.0 / (1.0 - 2.0 * math.exp(-1.0))


class DomainError(ValueError):
    """Argument outside the domain of a Bernstein function or parameter set."""


class InversionError(ArithmeticError):
    """Numerical Laplace inversion did not converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class Scaling:
    """Constants of the two sided power bounds at infinity."""

    delta1: float
    delta2: float
    a1: float = 1.0
    a2: float = 1.0


@dataclass(frozen=True)
class BernsteinSpec:
    kind: str
    params: tuple
    drift: float = 0.0
    scaling: Scaling | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown kind {self.kind!r}")
        if self.drift != 0.0:
            raise DomainError("drift must be zero under the scaling condition")
        _validate(self.kind, self.params)

    def __call__(self, lam):
        return phi_eval(self, lam)

    @property
    def index(self):
        """Exponent of the leading power at infinity (None for tabulated)."""
        k, p = self.kind, self.params
        if k == "stable":
            return p[0]
        if k == "stable_sum":
            return max(p[1::2])
        if k == "log_stable":
            return p[0]
        if k == "conjugate":
            base = p[0].index
            return None if base is None else 1.0 - base
        if k == "identity":
            return 1.0
        return None

    def label(self):
        k, p = self.kind, self.params
        if k == "stable":
            return f"stable(s={p[0]:g})"
        if k == "stable_sum":
            terms = "+".join(f"{w:g}*lam^{s:g}" for w, s in zip(p[0::2], p[1::2]))
            return f"sum({terms})"
        if k == "log_stable":
            return f"lam^{p[0]:g}*log(1+lam)^{p[1]:g}"
        if k == "conjugate":
            return f"conj[{p[0].label()}]"
        if k == "identity":
            return "lam"
        return f"tabulated({len(p) // 2} points)"


def _check_exponent(s):
    if not (0.0 < s < 1.0):
        raise DomainError(f"stable index s={s} rejected: s must lie in (0,1)")


def _validate(kind, p):
    if kind == "stable":
        if len(p) != 1:
            raise DomainError("stable takes one parameter")
        _check_exponent(p[0])
    elif kind == "stable_sum":
        if len(p) < 2 or len(p) % 2:
            raise DomainError("stable_sum takes (weight, exponent) pairs")
        for w, s in zip(p[0::2], p[1::2]):
            if not w > 0:
                raise DomainError("weights must be positive")
            _check_exponent(s)
    elif kind == "log_stable":
        if len(p) != 2:
            raise DomainError("log_stable takes (s, r)")
        s, r = p
        _check_exponent(s)
        if not (0.0 < s + r < 1.0):
            raise DomainError("log_stable needs 0 < s + r < 1")
    elif kind == "tabulated":
        if len(p) < 8 or len(p) % 2:
            raise DomainError("tabulated needs at least four (lam, value) pairs")
        lam = np.asarray(p[0::2], dtype=float)
        val = np.asarray(p[1::2], dtype=float)
        if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise DomainError("tabulated abscissae must be positive and increasing")
        if np.any(val <= 0) or np.any(np.diff(val) < 0):
            raise DomainError("tabulated values must be positive and nondecreasing")
    elif kind == "conjugate":
        if len(p) != 1 or not isinstance(p[0], BernsteinSpec):
            raise DomainError("conjugate wraps a single spec")
        if p[0].kind in ("conjugate", "identity"):
            raise DomainError("conjugate base must be a catalog kind")
    elif kind == "identity":
        if p:
            raise DomainError("identity takes no parameters")


def stable(s):
    return BernsteinSpec("stable", (float(s),))


def stable_sum(weights, exponents):
    flat = []
    for w, s in zip(weights, exponents):
        flat += [float(w), float(s)]
    return BernsteinSpec("stable_sum", tuple(flat))


def log_stable(s, r):
    return BernsteinSpec("log_stable", (float(s), float(r)))


def tabulated(lam, values):
    flat = []
    for a, b in zip(lam, values):
        flat += [float(a), float(b)]
    return BernsteinSpec("tabulated", tuple(flat))


def identity():
    return BernsteinSpec("identity", ())


# ---------------------------------------------------------------- evaluation


@lru_cache(maxsize=64)
def _table_interp(params):
    lam = np.log(np.asarray(params[0::2], dtype=float))
    val = np.log(np.asarray(params[1::2], dtype=float))
    return PchipInterpolator(lam, val, extrapolate=False), lam, val


def _tabulated_log(params, x):
    interp, lam, val = _table_interp(params)
    lo = (val[1] - val[0]) / (lam[1] - lam[0])
    hi = (val[-1] - val[-2]) / (lam[-1] - lam[-2])
    out = interp(np.clip(x, lam[0], lam[-1]))
    out = np.where(x < lam[0], val[0] + lo * (x - lam[0]), out)
    out = np.where(x > lam[-1], val[-1] + hi * (x - lam[-1]), out)
    return out


def _as_positive(lam):
    arr = np.asarray(lam, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("phi is evaluated at positive arguments only")
    return arr


def phi_eval(spec: BernsteinSpec, lam):
    """phi(lam) for positive ``lam`` (scalar or array)."""
    x = _as_positive(lam)
    k, p = spec.kind, spec.params
    if k == "stable":
        out = x ** p[0]
    elif k == "stable_sum":
        out = sum(w * x**s for w, s in zip(p[0::2], p[1::2]))
    elif k == "log_stable":
        out = x ** p[0] * np.log1p(x) ** p[1]
    elif k == "tabulated":
        out = np.exp(_tabulated_log(p, np.log(x)))
    elif k == "conjugate":
        out = x / phi_eval(p[0], x)
    else:
        out = x.copy()
    return out if np.ndim(out) else float(out)


def phi_prime(spec: BernsteinSpec, lam):
    """Derivative of phi; closed form where available, else a central difference."""
    x = _as_positive(lam)
    k, p = spec.kind, spec.params
    if k == "stable":
        out = p[0] * x ** (p[0] - 1.0)
    elif k == "stable_sum":
        out = sum(w * s * x ** (s - 1.0) for w, s in zip(p[0::2], p[1::2]))
    elif k == "log_stable":
        s, r = p
        L = np.log1p(x)
        out = s * x ** (s - 1.0) * L**r + r * x**s * L ** (r - 1.0) / (1.0 + x)
    elif k == "conjugate":
        f = phi_eval(p[0], x)
        out = (f - x * phi_prime(p[0], x)) / f**2
    elif k == "identity":
        out = np.ones_like(x)
    else:
        h = 1e-6 * x
        out = (phi_eval(spec, x + h) - phi_eval(spec, x - h)) / (2.0 * h)
    return out if np.ndim(out) else float(out)


def _phi_mp(spec, z):
    """phi at an mpmath (possibly complex) argument."""
    k, p = spec.kind, spec.params
    if k == "stable":
        return mp.power(z, p[0])
    if k == "stable_sum":
        return mp.fsum(w * mp.power(z, s) for w, s in zip(p[0::2], p[1::2]))
    if k == "log_stable":
        return mp.power(z, p[0]) * mp.power(mp.log(1 + z), p[1])
    if k == "conjugate":
        return z / _phi_mp(p[0], z)
    if k == "identity":
        return z
    if isinstance(z, mp.mpc) and z.imag != 0:
        raise InversionError("tabulated spec has no complex extension")
    return mp.mpf(float(phi_eval(spec, float(z))))


def _phi_prime_mp(spec, z):
    k, p = spec.kind, spec.params
    if k == "stable":
        return p[0] * mp.power(z, p[0] - 1)
    if k == "stable_sum":
        return mp.fsum(w * s * mp.power(z, s - 1) for w, s in zip(p[0::2], p[1::2]))
    if k == "log_stable":
        s, r = p
        L = mp.log(1 + z)
        return s * mp.power(z, s - 1) * mp.power(L, r) + r * mp.power(z, s) * mp.power(L, r - 1) / (1 + z)
    if k == "conjugate":
        f = _phi_mp(p[0], z)
        return (f - z * _phi_prime_mp(p[0], z)) / f**2
    if k == "identity":
        return mp.mpf(1)
    if isinstance(z, mp.mpc) and z.imag != 0:
        raise InversionError("tabulated spec has no complex extension")
    return mp.mpf(float(phi_prime(spec, float(z))))


# --------------------------------------------------------- Laplace inversion


@lru_cache(maxsize=8)
def _stehfest_weights(n):
    half = n // 2
    out = []
    with mp.workdps(50):
        for k in range(1, n + 1):
            acc = mp.mpf(0)
            for j in range((k + 1) // 2, min(k, half) + 1):
                acc += (mp.mpf(j) ** half * mp.factorial(2 * j)) / (
                    mp.factorial(half - j)
                    * mp.factorial(j)
                    * mp.factorial(j - 1)
                    * mp.factorial(k - j)
                    * mp.factorial(2 * j - k)
                )
            out.append((-1) ** (k + half) * acc)
    return tuple(out)


def _stehfest(F, t, n):
    with mp.workdps(40):
        a = mp.log(2) / mp.mpf(t)
        return float(a * mp.fsum(v * F(k * a) for k, v in enumerate(_stehfest_weights(n), start=1)))


def _talbot(F, t, m=32):
    with mp.workdps(45):
        t = mp.mpf(t)
        r = mp.mpf(2 * m) / (5 * t)
        acc = F(r) * mp.exp(r * t) / 2
        for k in range(1, m):
            th = k * mp.pi / m
            cot = mp.cot(th)
            z = r * th * (cot + 1j)
            sig = th + (th * cot - 1) * cot
            acc += (mp.exp(t * z) * F(z) * (1 + 1j * sig)).real
        return float(r / m * acc)


def invert_laplace(F, t, *, terms=14, tol=1e-4):
    """Invert the Laplace transform ``F`` (an mpmath callable) at ``t > 0``.

    Gaver-Stehfest with ``terms`` and ``terms - 2`` weights is tried first.
    When the two disagree by more than ``tol`` (relative) a 32 node fixed
    Talbot contour is used instead.
    """
    if not t > 0:
        raise DomainError("inversion needs t > 0")
    hi = _stehfest(F, t, terms)
    lo = _stehfest(F, t, terms - 2)
    if abs(hi - lo) <= tol * abs(hi):
        return hi
    try:
        return _talbot(F, t)
    except (InversionError, ValueError, ZeroDivisionError) as exc:
        raise InversionError(
            "Stehfest disagreement and no Talbot fallback",
            {"t": t, "stehfest": hi, "stehfest_lower": lo, "cause": str(exc)},
        ) from exc


def _vectorize(fun, t):
    arr = np.asarray(t, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("densities are defined for t > 0")
    out = np.array([fun(float(v)) for v in arr.ravel()]).reshape(arr.shape)
    return out if out.ndim else float(out)


@lru_cache(maxsize=200_000)
def _u_inverted(spec, t):
    return invert_laplace(lambda z: 1 / _phi_mp(spec, z), t)


@lru_cache(maxsize=200_000)
def _mu_inverted(spec, t):
    return invert_laplace(lambda z: _phi_prime_mp(spec, z), t) / t


@lru_cache(maxsize=200_000)
def _tail_inverted(spec, t):
    return invert_laplace(lambda z: _phi_mp(spec, z) / z, t)


def potential_density(spec: BernsteinSpec, t):
    """Density u(t) of the potential measure: its Laplace transform is 1/phi."""
    k, p = spec.kind, spec.params
    if k == "stable":
        s = p[0]
        return _vectorize(lambda v: v ** (s - 1.0) / gamma(s), t)
    if k == "identity":
        return _vectorize(lambda v: 1.0, t)
    return _vectorize(lambda v: _u_inverted(spec, v), t)


def levy_density(spec: BernsteinSpec, t):
    """Levy density mu(t).

    Non-catalog kinds invert phi', which is the Laplace transform of
    ``t * mu(t)``.
    """
    k, p = spec.kind, spec.params
    if k == "stable":
        s = p[0]
        return _vectorize(lambda v: s * v ** (-1.0 - s) / gamma(1.0 - s), t)
    if k == "stable_sum":
        pairs = list(zip(p[0::2], p[1::2]))
        return _vectorize(lambda v: sum(w * s * v ** (-1.0 - s) / gamma(1.0 - s) for w, s in pairs), t)
    if k == "identity":
        raise DomainError("phi(lam) = lam has no Levy measure")
    return _vectorize(lambda v: _mu_inverted(spec, v), t)


def levy_tail(spec: BernsteinSpec, t):
    """Tail mass mu((t, inf)); its Laplace transform is phi(lam)/lam."""
    k, p = spec.kind, spec.params
    if k == "stable":
        s = p[0]
        return _vectorize(lambda v: v ** (-s) / gamma(1.0 - s), t)
    if k == "stable_sum":
        pairs = list(zip(p[0::2], p[1::2]))
        return _vectorize(lambda v: sum(w * v ** (-s) / gamma(1.0 - s) for w, s in pairs), t)
    if k == "identity":
        raise DomainError("phi(lam) = lam has no Levy measure")
    return _vectorize(lambda v: _tail_inverted(spec, v), t)


def levy_bound(spec, t):
    """Upper bound C * phi'(1/t) / t**2 for the Levy density."""
    t = np.asarray(t, dtype=float)
    return BOUND_CONSTANT * phi_prime(spec, 1.0 / t) / t**2


def potential_bound(spec, t):
    """Upper bound C * phi'(1/t) / (t**2 phi(1/t)**2) for the potential density."""
    t = np.asarray(t, dtype=float)
    return BOUND_CONSTANT * phi_prime(spec, 1.0 / t) / (t**2 * phi_eval(spec, 1.0 / t) ** 2)


# ----------------------------------------------------------------- conjugate


@dataclass(frozen=True)
class ConjugatePair:
    spec: BernsteinSpec
    conj: BernsteinSpec

    def product(self, lam):
        """phi * phi_conj, which equals lam."""
        return phi_eval(self.spec, lam) * phi_eval(self.conj, lam)

    def conj_potential_density(self, t):
        return potential_density(self.conj, t)


def conjugate(spec: BernsteinSpec) -> ConjugatePair:
    if spec.kind == "stable":
        return ConjugatePair(spec, stable(1.0 - spec.params[0]))
    if spec.kind == "conjugate":
        return ConjugatePair(spec, spec.params[0])
    if spec.kind == "identity":
        raise DomainError("lam / lam is constant and not a zero-drift Bernstein function")
    return ConjugatePair(spec, BernsteinSpec("conjugate", (spec,)))


# ------------------------------------------------------------------- scaling


@dataclass
class ScalingReport:
    delta1_hat: float
    delta2_hat: float
    a1_hat: float
    a2_hat: float
    declared: Scaling | None
    brackets: bool | None
    derivative_floor: float
    global_scaling_ok: bool
    extra: dict = field(default_factory=dict)


def verify_wsc(spec: BernsteinSpec, t_grid=None, lam_grid=None) -> ScalingReport:
    """Empirical scaling exponents at infinity.

    The exponents are the extremes of ``log(phi(lam t)/phi(t)) / log(lam)``
    over ``t`` and ``lam > 1`` in the grids (both inside [1, 1e6]).
    """
    t_grid = np.logspace(0, 6, 25) if t_grid is None else np.asarray(t_grid, dtype=float)
    lam_grid = np.logspace(0, 6, 25) if lam_grid is None else np.asarray(lam_grid, dtype=float)
    if t_grid.min() < 1 or lam_grid.min() < 1 or t_grid.max() > 1e6 or lam_grid.max() > 1e6:
        raise DomainError("scaling grids must lie in [1, 1e6]")
    lam = lam_grid[lam_grid > 1.0]
    T, L = np.meshgrid(t_grid, lam, indexing="ij")
    ratio = phi_eval(spec, L * T) / phi_eval(spec, T)
    expo = np.log(ratio) / np.log(L)
    d1, d2 = float(expo.min()), float(expo.max())
    a1 = float(np.min(ratio / L**d1))
    a2 = float(np.max(ratio / L**d2))
    declared = spec.scaling
    brackets = None
    if declared is not None:
        brackets = bool(declared.delta1 <= d1 + 1e-12 and d2 <= declared.delta2 + 1e-12)
    grid = np.logspace(0, 6, 61)
    floor = float(np.min(phi_prime(spec, grid) * grid / phi_eval(spec, grid)))
    lam_all = np.logspace(-4, 4, 33)
    t_all = np.logspace(-4, 4, 33)
    T2, L2 = np.meshgrid(t_all, lam_all, indexing="ij")
    r2 = phi_eval(spec, L2 * T2) / phi_eval(spec, T2)
    ok = bool(np.all(r2 >= np.minimum(1, L2) * (1 - 1e-12)) and np.all(r2 <= np.maximum(1, L2) * (1 + 1e-12)))
    return ScalingReport(d1, d2, a1, a2, declared, brackets, floor, ok)


def with_scaling(spec: BernsteinSpec, report: ScalingReport | None = None) -> BernsteinSpec:
    """Return ``spec`` carrying scaling constants, estimating them if undeclared."""
    if spec.scaling is not None:
        return spec
    report = report or verify_wsc(spec)
    sc = Scaling(report.delta1_hat, report.delta2_hat, report.a1_hat, report.a2_hat)
    return BernsteinSpec(spec.kind, spec.params, spec.drift, sc)


# ------------------------------------------------------------- serialization


def _to_obj(spec):
    params = [_to_obj(p) if isinstance(p, BernsteinSpec) else p for p in spec.params]
    obj = {"kind": spec.kind, "params": params}
    if spec.scaling is not None:
        sc = spec.scaling
        obj["declared_scaling"] = {"delta1": sc.delta1, "delta2": sc.delta2, "a1": sc.a1, "a2": sc.a2}
    return obj


def _from_obj(obj):
    params = tuple(_from_obj(p) if isinstance(p, dict) else float(p) for p in obj["params"])
    sc = obj.get("declared_scaling")
    scaling = Scaling(**{k: float(v) for k, v in sc.items()}) if sc else None
    return BernsteinSpec(obj["kind"], params, 0.0, scaling)


def to_text(spec: BernsteinSpec) -> str:
    """Structured text form; floats are written with shortest round-trip repr."""
    return json.dumps(_to_obj(spec), sort_keys=True)


def from_text(text: str) -> BernsteinSpec:
    return _from_obj(json.loads(text))


def parse_phi(text: str) -> BernsteinSpec:
    """Parse a command line description.

    Accepted forms: ``stable:0.5``, ``sum:0.5@0.3,0.5@0.7`` (weight@exponent),
    ``log:0.5,0.2``, ``identity`` or a JSON object as written by ``to_text``.
    """
    text = text.strip()
    if text.startswith("{"):
        return from_text(text)
    head, _, rest = text.partition(":")
    head = head.lower()
    if head == "stable":
        return stable(float(rest))
    if head == "sum":
        pairs = [item.split("@") for item in rest.split(",")]
        return stable_sum([float(w) for w, _ in pairs], [float(s) for _, s in pairs])
    if head == "log":
        s, r = (float(v) for v in rest.split(","))
        return log_stable(s, r)
    if head == "identity":
        return identity()
    raise DomainError(f"cannot parse phi description {text!r}")
