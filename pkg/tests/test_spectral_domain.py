import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phigreen import spectral_domain as sd

# Bessel zeros squared, from mpmath.besseljzero at 25 digits.
J01_SQ = 5.783185962946784521
J11_SQ = 14.68197064212389326
J21_SQ = 26.37461642716339077
J02_SQ = 30.47126234366208640
PHI1_CENTER = 1.086761636131272509  # 1 / (sqrt(pi) J_1(j_{0,1}))


@pytest.fixture(scope="module")
def disk():
    g = sd.make_domain("disk", 50)
    return g, sd.build_spectrum(g, 50)


def test_disk_eigenvalues(disk):
    _, s = disk
    expect = [J01_SQ, J11_SQ, J11_SQ, J21_SQ, J21_SQ, J02_SQ]
    assert np.allclose(s.eigenvalues[:6], expect, rtol=1e-12)
    assert np.all(np.diff(s.eigenvalues) >= 0)


def test_disk_ground_state_normalisation(disk):
    _, s = disk
    assert s.evaluate(np.array([[0.0, 0.0]]), [0])[0, 0] == pytest.approx(PHI1_CENTER, rel=1e-10)


def test_interval_and_square_eigenvalues():
    s = sd.build_spectrum(sd.make_domain("interval", 10), 10)
    assert np.allclose(s.eigenvalues, np.arange(1, 11) ** 2)
    q = sd.build_spectrum(sd.make_domain("square", 10), 4)
    assert np.allclose(q.eigenvalues, math.pi**2 * np.array([2, 5, 5, 8]))


@pytest.mark.parametrize("text", ["disk", "interval", "square", "rectangle:2,1"])
def test_quadrature_orthonormality(text):
    s = sd.build_spectrum(sd.make_domain(text, 40), 40)
    assert sd.orthonormality_defect(s) < 1e-10


def test_gridmask_approximates_disk():
    g = sd.make_domain("gridmask:48")
    s = sd.build_spectrum(g, 6)
    assert sd.orthonormality_defect(s) < 1e-8
    assert s.eigenvalues[0] == pytest.approx(J01_SQ, rel=0.05)
    assert sd.verify_hopf(s).passed


def test_gridmask_rejects_oversized_request():
    g = sd.make_domain("gridmask:16")
    with pytest.raises(ValueError):
        sd.build_spectrum(g, g.nodes.shape[0])


def test_weyl_and_hopf_bands(disk):
    _, s = disk
    w = sd.verify_weyl(s)
    assert w.passed and w.ratio < 2
    h = sd.verify_hopf(s)
    assert h.passed and h.detail["phi1_positive"]


def test_parseval_for_eigenfunction_combination(disk):
    g, s = disk
    f = 2 * s.nodal[0] - s.nodal[7]
    c, defect = sd.coefficients(s, f)
    assert abs(defect) < 1e-10
    assert c[0] == pytest.approx(2) and c[7] == pytest.approx(-1)


@settings(max_examples=25, deadline=None)
@given(r=st.floats(0.0, 0.99), th=st.floats(0, 2 * math.pi))
def test_disk_distance_to_boundary(r, th):
    g = sd.make_domain("disk", 20)
    p = np.array([[r * math.cos(th), r * math.sin(th)]])
    assert g.delta(p)[0] == pytest.approx(1 - r, abs=1e-12)


def test_mean_spectrum_is_radial():
    g = sd.make_domain("disk", 20)
    m = sd.mean_spectrum(g, 30)
    assert m.eigenvalues[0] == pytest.approx(J01_SQ)
    assert m.eigenvalues[1] == pytest.approx(J02_SQ)
    assert np.all(np.abs(m.means) > 0)


def test_cache_round_trip(tmp_path, disk):
    _, s = disk
    path = tmp_path / "spec.bin"
    sd.save_spectrum(s, path)
    back = sd.load_spectrum(path)
    assert np.array_equal(back.eigenvalues, s.eigenvalues)


def test_corrupted_cache_is_refused(tmp_path, disk):
    _, s = disk
    path = tmp_path / "spec.bin"
    sd.save_spectrum(s, path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(sd.CacheError):
        sd.load_spectrum(path)


def test_unknown_domain():
    with pytest.raises(ValueError):
        sd.make_domain("torus")
