import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phigreen import bernstein as bn
from phigreen import kernels as kn
from phigreen.spectral_domain import make_domain


def classical_disk_green(x, y):
    xc, yc = x[:, 0] + 1j * x[:, 1], y[:, 0] + 1j * y[:, 1]
    return np.log(np.abs(1 - xc * np.conj(yc)) / np.abs(xc - yc)) / (2 * math.pi)


def classical_disk_poisson(x, z):
    xc, zc = x[:, 0] + 1j * x[:, 1], z[:, 0] + 1j * z[:, 1]
    return (1 - np.abs(xc) ** 2) / (2 * math.pi * np.abs(xc - zc) ** 2)


@pytest.fixture(scope="module")
def interval_half():
    return kn.KernelSet(bn.stable(0.5), make_domain("interval", 40), 40)


@pytest.fixture(scope="module")
def disk_classic():
    return kn.KernelSet(bn.identity(), make_domain("disk", 100), 100)


@pytest.fixture(scope="module")
def disk_half():
    return kn.KernelSet(bn.stable(0.5), make_domain("disk", 100), 100)


X2 = np.array([[0.3, 0.1], [-0.5, 0.2], [0.0, -0.7]])
Y2 = np.array([[-0.2, 0.4], [0.6, -0.6], [0.1, 0.8]])


def test_interval_square_root_green_closed_form(interval_half):
    # sum of 2/pi sin(jx) sin(jy) / j has a logarithmic closed form
    x = np.array([[0.7], [1.5], [2.0]])
    y = np.array([[1.2], [2.9], [0.4]])
    ref = (np.log(np.abs(np.sin((x + y) / 2) / np.sin((x - y) / 2))) / math.pi)[:, 0]
    for route in ("spectral", "subordination"):
        assert np.allclose(kn.green_phi(interval_half, x, y, route), ref, rtol=1e-6)


def test_classical_green_on_disk(disk_classic):
    ref = classical_disk_green(X2, Y2)
    assert np.allclose(kn.green_phi(disk_classic, X2, Y2), ref, rtol=1e-4)
    assert np.allclose(kn.green_classic(disk_classic, X2, Y2, route="subordination"), ref, rtol=1e-4)


def test_classical_poisson_on_disk(disk_classic):
    z = np.array([[1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]])
    assert np.allclose(kn.poisson_classic(disk_classic, X2, z), classical_disk_poisson(X2, z), rtol=1e-3)


def test_harmonic_measure_has_unit_mass(disk_classic):
    assert np.allclose(kn.poisson_sigma(disk_classic, X2), 1.0, atol=1e-8)


def test_self_conjugate_killing_equals_sigma_potential(interval_half):
    x = np.array([[0.1], [0.5], [1.0]])
    assert np.allclose(kn.killing_function(interval_half, x), kn.poisson_sigma(interval_half, x), rtol=1e-6)


def test_two_routes_agree(disk_half):
    a = kn.green_phi(disk_half, X2, Y2, "spectral")
    b = kn.green_phi(disk_half, X2, Y2, "subordination")
    assert np.allclose(a, b, rtol=1e-3)


@settings(max_examples=15, deadline=None)
@given(
    r1=st.floats(0.05, 0.9), a1=st.floats(0, 2 * math.pi),
    r2=st.floats(0.05, 0.9), a2=st.floats(0, 2 * math.pi),
)
def test_green_symmetric_positive(disk_half, r1, a1, r2, a2):
    x = np.array([[r1 * math.cos(a1), r1 * math.sin(a1)]])
    y = np.array([[r2 * math.cos(a2), r2 * math.sin(a2)]])
    if np.linalg.norm(x - y) < 0.05:
        return
    gxy = kn.green_phi(disk_half, x, y)
    gyx = kn.green_phi(disk_half, y, x)
    assert gxy > 0
    assert gxy == pytest.approx(gyx, rel=1e-10)


def test_diagonal_is_refused(disk_half):
    with pytest.raises(kn.DiagonalError):
        kn.green_phi(disk_half, X2[:1], X2[:1])


def test_spectral_inversion(disk_half):
    assert kn.verify_spectral_inversion(disk_half, j_max=10, n_points=10) < 1e-6


def test_killing_identity_first_mode(disk_half):
    defect, _, _ = kn.verify_killing_identity(disk_half, 1)
    assert defect < 1e-4


def test_killing_positive_and_decreasing_inward(disk_half):
    pts = np.column_stack([np.linspace(0.95, 0.0, 8), np.zeros(8)])
    k = kn.killing_function(disk_half, pts)
    assert np.all(k > 0) and np.all(np.diff(k) < 0)


def test_factorization_through_conjugate(disk_half):
    pairs = np.array([[[0.2, 0.1], [-0.3, 0.4]], [[0.0, 0.5], [0.4, -0.2]]])
    rep = kn.verify_factorization(disk_half, pairs)
    assert rep.mode_defect < 1e-12
    assert rep.max_defect < 2e-2


def test_sharp_bands_small_sample(disk_half):
    sample = kn.stratified_sample(disk_half.geom, n=6, seed=1)
    reps = kn.verify_sharp_bounds(disk_half, sample)
    assert reps["green"].passed and reps["poisson"].passed and reps["jump"].passed
