import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_bvp

from phigreen import bernstein as bn
from phigreen import potentials as pt
from phigreen import solvers as sv
from phigreen.kernels import KernelSet
from phigreen.spectral_domain import make_domain


@pytest.fixture(scope="module")
def line():
    g = make_domain("interval", 100)
    return KernelSet(bn.identity(), g, 40)


@pytest.fixture(scope="module")
def disk():
    return KernelSet(bn.stable(0.5), make_domain("disk", 400), 100)


def bvp_reference(sign, m, p, x):
    """-u'' = sign m (u+)^p on (0, pi), u = 1 at both ends, via scipy collocation."""
    sol = solve_bvp(
        lambda s, y: np.vstack([y[1], -sign * m * np.maximum(y[0], 0) ** p]),
        lambda a, b: np.array([a[0] - 1, b[0] - 1]),
        np.linspace(0, math.pi, 50), np.ones((2, 50)), tol=1e-10,
    )
    return sol.sol(x)[0]


def test_nonpositive_matches_collocation(line):
    ps = sv.ProblemSpec(line, sv.power_nonlinearity(2, -1), sv.parse_boundary("const:1", line.geom))
    rep = sv.solve_nonpositive(ps)
    assert rep.classification == "CONVERGENT"
    ref = bvp_reference(-1, 1.0, 2, line.geom.nodes[:, 0])
    assert np.max(np.abs(rep.u - ref)) < 1e-5


def test_monotone_matches_collocation(line):
    ps = sv.ProblemSpec(line, sv.power_nonlinearity(1.5, 1, 0.1), sv.parse_boundary("const:1", line.geom))
    rep = sv.solve_monotone(ps)
    assert rep.converged
    ref = bvp_reference(1, 0.1, 1.5, line.geom.nodes[:, 0])
    assert np.max(np.abs(rep.u - ref)) < 1e-6


def test_linear_superposition(disk):
    g = disk.geom
    rng = np.random.default_rng(1)
    lam = pt.InteriorMeasure(rng.uniform(0, 1, g.nodes.shape[0]))
    zeta = pt.BoundaryMeasure(rng.uniform(0, 1, g.boundary_nodes.shape[0]))
    u = sv.solve_linear(sv.ProblemSpec(disk, zeta=zeta, lam=lam)).u
    assert np.allclose(u, pt.green_apply(disk, lam.density) + pt.poisson_integral(disk, zeta))
    assert np.all(u >= 0)


def test_monotone_certificate_and_bounds(disk):
    sig = pt.BoundaryMeasure.sigma(disk.geom)
    ps = sv.ProblemSpec(disk, sv.power_nonlinearity(1.5, 1, 1.0), sig)
    worst, _ = sv.certify_monotone(ps)
    ps.nonlinearity = ps.nonlinearity.with_m(0.5 / worst)
    rep = sv.solve_monotone(ps)
    assert rep.converged and rep.residual_sup[-1] < 1e-8
    assert rep.diagnostics["precondition_ratio"] == pytest.approx(0.5)
    assert np.all(rep.u >= ps.P - 1e-12) and np.all(rep.u <= 2 * ps.P + 1e-12)


def test_monotone_refuses_uncertified(disk):
    ps = sv.ProblemSpec(disk, sv.power_nonlinearity(1.5, 1, 1e6), pt.BoundaryMeasure.sigma(disk.geom))
    with pytest.raises(sv.PreconditionError) as err:
        sv.solve_monotone(ps)
    assert err.value.nodes.size > 0


def test_monotone_refuses_wrong_sign(disk):
    ps = sv.ProblemSpec(disk, sv.power_nonlinearity(1.5, -1), pt.BoundaryMeasure.sigma(disk.geom))
    with pytest.raises(sv.PreconditionError):
        sv.solve_monotone(ps)


def test_nonpositive_start_independent(disk):
    ps = sv.ProblemSpec(disk, sv.power_nonlinearity(1.5, -1), pt.BoundaryMeasure.sigma(disk.geom))
    a = sv.solve_nonpositive(ps)
    b = sv.solve_nonpositive(ps, start="zero")
    assert a.converged and b.converged
    assert np.max(np.abs(a.u - b.u)) < 1e-8
    assert np.all(a.u >= -1e-12) and np.all(a.u <= ps.P + 1e-12)
    assert np.max(np.abs(sv.weak_defects(ps, a.u))) < 1e-8


def test_signed_bound(disk):
    g = disk.geom
    ps = sv.ProblemSpec(disk, sv.sine_nonlinearity(1.0), sv.parse_boundary("cos:0,1", g))
    rep = sv.solve_signed(ps, seed=3)
    assert rep.converged
    assert rep.diagnostics["bound_excess"] <= 0


def test_signed_seed_reproducible(disk):
    ps = sv.ProblemSpec(disk, sv.sine_nonlinearity(1.0), sv.parse_boundary("cos:0,1", disk.geom))
    a = sv.smallness_certificate(ps, seed=5)
    b = sv.smallness_certificate(ps, seed=5)
    assert a[0] == b[0]


def test_bracket_solve_stays_inside(disk):
    g = disk.geom
    ps = sv.ProblemSpec(disk, sv.sine_nonlinearity(1.0), sv.parse_boundary("const:1", g))
    n = g.nodes.shape[0]
    rep = sv.bracket_solve(ps, -np.ones(n), np.ones(n))
    assert rep.converged and rep.diagnostics["inside_bracket"]


def test_bracket_rejects_inverted_pair(disk):
    g = disk.geom
    ps = sv.ProblemSpec(disk, sv.sine_nonlinearity(1.0), sv.parse_boundary("const:1", g))
    n = g.nodes.shape[0]
    with pytest.raises(sv.PreconditionError):
        sv.bracket_solve(ps, np.ones(n), -np.ones(n))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kato_inequality_on_random_data(disk, seed):
    rng = np.random.default_rng(seed)
    spec = disk.spectrum
    h = (rng.normal(size=spec.count) / np.arange(1, spec.count + 1)) @ spec.nodal
    assert sv.verify_kato(disk, h).passed


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_nonnegative_data_give_nonnegative_solution(disk, seed):
    g = disk.geom
    rng = np.random.default_rng(seed)
    lam = pt.InteriorMeasure(rng.uniform(0, 1, g.nodes.shape[0]) * (rng.uniform(size=g.nodes.shape[0]) < 0.05))
    zeta = pt.BoundaryMeasure(rng.uniform(0, 1, g.boundary_nodes.shape[0]))
    u = sv.solve_linear(sv.ProblemSpec(disk, zeta=zeta, lam=lam)).u
    assert u.min() >= -1e-12 * u.max()


def test_max_of_solutions_is_subsolution(disk):
    g = disk.geom
    nl = sv.power_nonlinearity(1.5, -1)
    a = sv.solve_nonpositive(sv.ProblemSpec(disk, nl, sv.parse_boundary("cos:1,0.5", g))).u
    b = sv.solve_nonpositive(sv.ProblemSpec(disk, nl, sv.parse_boundary("cos:1,-0.5", g))).u
    ps = sv.ProblemSpec(disk, nl, pt.BoundaryMeasure(np.maximum(
        sv.parse_boundary("cos:1,0.5", g).density, sv.parse_boundary("cos:1,-0.5", g).density)))
    assert sv.verify_max_subsolution(disk, a, b, ps)["passed"]


def test_envelope_check_catches_bad_declaration(disk):
    nl = sv.Nonlinearity(lambda x, t: 2 * t, lambda x: np.ones(x.shape[0]), lambda t: t, 1.0, frozenset(), "bad")
    with pytest.raises(sv.PreconditionError):
        nl.check(disk.geom)


@pytest.mark.parametrize("text,label", [("power:p=1.5,sign=-1,m=0.1", "power"), ("sine:m=2", "sine"),
                                        ("square:m=0.5", "square"), ("zero", "zero")])
def test_parse_nonlinearity(text, label):
    assert sv.parse_nonlinearity(text).label.startswith(label)


def test_parse_rejects_unknown(disk):
    with pytest.raises(ValueError):
        sv.parse_nonlinearity("cube")
    with pytest.raises(ValueError):
        sv.parse_boundary("wave:1", disk.geom)


def test_report_serialises(tmp_path, disk):
    ps = sv.ProblemSpec(disk, sv.power_nonlinearity(1.5, -1), pt.BoundaryMeasure.sigma(disk.geom))
    rep = sv.solve_nonpositive(ps)
    rep.to_json(tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert back["classification"] == "CONVERGENT"
    rep.dump_csv(tmp_path / "u.csv", disk.geom)
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "x1,x2,delta,u"


def test_classifier_rules():
    assert sv._classify([1, 1.05, 1.02], ["CONVERGENT"] * 3)[0] == "CONVERGENT"
    assert sv._classify([1, 3, 9], ["CONVERGENT"] * 3) == ("DIVERGENT", "norm growth")
    assert sv._classify([1, math.inf], ["CONVERGENT", "DIVERGENT"]) == ("DIVERGENT", "blow-up")
    assert sv._classify([1, 1, 1], ["CONVERGENT"] * 3, [0.3, 0.2, 0.1])[1] == "boundary datum lost"


def test_threshold_sides():
    fam = sv.refinement_family(bn.stable(0.5))
    out = sv.threshold_experiment(fam, [1.5, 2.5])
    assert out["verdict"] == {1.5: "CONVERGENT", 2.5: "DIVERGENT"}
    assert out["threshold_theory"] == pytest.approx(2.0)
