import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phigreen import bernstein as bn
from phigreen import kernels as kn
from phigreen import potentials as pt
from phigreen.spectral_domain import make_domain

# Moments of U(t) t on (0, 1), mpmath quadrature after t = exp(-v), 30 digits.
MOMENT_BORDERLINE = 1.18988397034434958  # beta = 2, r = -2
MOMENT_LOG = 1.06089401785560819  # beta = 0.5, r = 1


@pytest.fixture(scope="module")
def geom():
    return make_domain("disk", 400)


@pytest.fixture(scope="module")
def half(geom):
    return kn.KernelSet(bn.stable(0.5), geom, 100)


@pytest.fixture(scope="module")
def classic(geom):
    return kn.KernelSet(bn.identity(), geom, 100)


def test_delta_norm_of_constant(geom):
    # integral of (1 - r) over the unit disk
    assert pt.delta_norm(geom, np.ones(geom.nodes.shape[0])) == pytest.approx(math.pi / 3, rel=1e-12)


def test_harmonic_extension_of_linear_datum(classic, geom):
    u = pt.poisson_integral(classic, pt.BoundaryMeasure.from_function(geom, lambda z: z[:, 0]))
    assert np.max(np.abs(u - geom.nodes[:, 0])) < 1e-4


def test_torsion_function(classic, geom):
    v = pt.green_apply(classic, np.ones(geom.nodes.shape[0]))
    r2 = (geom.nodes**2).sum(axis=1)
    assert np.max(np.abs(v - (1 - r2) / 4)) < 1e-6


def test_green_inverts_symbol(half, geom):
    r2 = (geom.nodes**2).sum(axis=1)
    f = np.sin(math.pi * r2)
    assert np.allclose(pt.green_apply(half, half.field.apply(half.symbol, f)), f, atol=1e-12)


def test_atom_potential_matches_classical_kernel(classic, geom):
    y = 0.31 + 0.02j
    G = pt.green_potential(classic, pt.InteriorMeasure(None, [((y.real, y.imag), 1.0)]))
    xc = geom.nodes[:, 0] + 1j * geom.nodes[:, 1]
    ref = np.log(np.abs(1 - xc * np.conj(y)) / np.abs(xc - y)) / (2 * math.pi)
    far = np.abs(xc - y) > 0.2
    assert np.max(np.abs(G - ref)[far] / ref[far]) < 5e-3


def test_atom_on_node_is_tagged(half, geom):
    p = tuple(geom.nodes[500])
    with pytest.warns(RuntimeWarning):
        G = pt.green_potential(half, pt.InteriorMeasure(None, [(p, 1.0)]))
    assert np.isinf(G[500])


def test_atoms_outside_rejected(half):
    with pytest.raises(ValueError):
        pt.green_potential(half, pt.InteriorMeasure(None, [((1.2, 0.0), 1.0)]))


def test_pointwise_ratio_recovers_datum(half, geom):
    u = pt.poisson_integral(half, pt.BoundaryMeasure.from_function(geom, lambda z: 2 + z[:, 0]))
    rs = pt.pointwise_boundary_ratio(half, u, 0)
    assert np.all(np.diff(rs.delta) < 0)
    assert rs.ratio[-1] == pytest.approx(3.0, abs=1e-4)


def test_weak_trace_recovers_boundary_integral(half, geom):
    u = pt.poisson_integral(half, pt.BoundaryMeasure.from_function(geom, lambda z: 2 + z[:, 0]))
    assert pt.weak_boundary_trace(half, u, 0.01) == pytest.approx(4 * math.pi, rel=0.02)
    assert pt.weak_boundary_trace(half, u, 0.01, lambda x: x[:, 0] ** 2) == pytest.approx(2 * math.pi, rel=0.03)


def test_weak_trace_rejects_thin_collar(half, geom):
    with pytest.raises(ValueError):
        pt.weak_boundary_trace(half, np.ones(geom.nodes.shape[0]), geom.spacing)


def test_green_potential_has_vanishing_trace(half, geom):
    u = pt.green_apply(half, np.ones(geom.nodes.shape[0]))
    assert pt.weak_boundary_trace(half, u, 0.01) < 1e-2


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_poisson_integral_is_linear(half, geom, a, b):
    z1 = pt.BoundaryMeasure.from_function(geom, lambda z: z[:, 0])
    z2 = pt.BoundaryMeasure.from_function(geom, lambda z: z[:, 1] ** 2)
    both = pt.BoundaryMeasure(a * z1.density + b * z2.density)
    lhs = pt.poisson_integral(half, both)
    rhs = a * pt.poisson_integral(half, z1) + b * pt.poisson_integral(half, z2)
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + abs(a) + abs(b)))


def test_poisson_kernel_positive(half):
    assert np.all(pt.poisson_kernel_field(half, 3) > 0)


def test_point_mass_folds_into_node(geom):
    m = pt.BoundaryMeasure.point_mass(4, 2.0)
    nod = m.nodal(geom)
    assert nod[4] * geom.boundary_weights[4] == pytest.approx(2.0)
    assert m.total_variation(geom) == 2.0


def test_profile_moments():
    assert pt.UProfile(0, 0).moment() == pytest.approx(0.5, rel=1e-12)
    assert pt.UProfile(1.4, 0).moment() == pytest.approx(1 / 0.6, rel=1e-12)
    assert pt.UProfile(2, -2).moment() == pytest.approx(MOMENT_BORDERLINE, rel=1e-9)
    assert pt.UProfile(0.5, 1).moment() == pytest.approx(MOMENT_LOG, rel=1e-9)
    assert pt.UProfile(2.5, 0).moment() == math.inf


def test_profile_flags():
    assert pt.UProfile(1.4, 0).flags() == {"U1": True, "U2": True, "U3": True, "U4": True}
    assert not pt.UProfile(2, 0).integrable
    assert pt.UProfile(2, -1.5).integrable


def test_profile_rhs_closed_form_for_constant():
    # s = 1/2, U = 1: d/2 + d + d log(D/d)
    d, D = 0.01, 2.0
    rhs = pt.u_profile_rhs(bn.stable(0.5), pt.UProfile(0, 0), d, D)
    assert rhs == pytest.approx(1.5 * d + d * math.log(D / d), rel=1e-8)


def test_nonintegrable_profile_is_infinite(half):
    with pytest.raises(pt.InfiniteProfile) as err:
        pt.u_profile_bound(half, pt.UProfile(2.5, 0), [0])
    assert err.value.classification == "infinite"


def test_profile_bound_band(half, geom):
    line = pt._normal_line(geom, 0)
    d = geom.node_delta[line]
    sel = line[(d >= 2 * geom.spacing) & (d <= 0.6 * geom.inradius)]
    lhs, rhs = pt.u_profile_bound(half, pt.UProfile(0.5, 0), sel)
    q = lhs / rhs
    assert q.max() / q.min() < 30


def test_series_dump(tmp_path):
    path = tmp_path / "s.csv"
    pt.dump_series_csv(path, [0.1, 0.01], [1.0, 2.0], 2.0)
    lines = path.read_text().splitlines()
    assert lines[0] == "delta,value,reference,relative_error"
    assert lines[1].endswith(",0.5")
