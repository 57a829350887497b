import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phigreen import bernstein as bn

# Values computed once with mpmath.invertlaplace(method="dehoog") at 40 digits.
U_SUM = {0.01: 5.0040164319022006, 0.1: 1.921982144404107, 1.0: 0.57813055862587194, 10.0: 0.13432825181344374}
U_LOG = {0.05: 2.3621905510265839, 0.5: 0.92760452516739213, 2.0: 0.6102653758110677}
MU_LOG = {0.05: 28.762706055187722, 0.5: 0.94698470404752965, 2.0: 0.090789548688097143}

indices = st.floats(min_value=0.05, max_value=0.95)
positive = st.floats(min_value=1e-3, max_value=1e3)


def test_stable_closed_forms():
    phi = bn.stable(0.5)
    t = np.array([0.1, 1.0, 4.0])
    assert np.allclose(bn.phi_eval(phi, t), np.sqrt(t))
    assert np.allclose(bn.potential_density(phi, t), t**-0.5 / math.sqrt(math.pi))
    assert np.allclose(bn.levy_density(phi, t), 0.5 * t**-1.5 / math.sqrt(math.pi))
    assert np.allclose(bn.levy_tail(phi, t), t**-0.5 / math.sqrt(math.pi))


@pytest.mark.parametrize("t", sorted(U_SUM))
def test_sum_potential_density_matches_reference(t):
    phi = bn.stable_sum([0.5, 0.5], [0.3, 0.7])
    assert bn.potential_density(phi, t) == pytest.approx(U_SUM[t], rel=1e-5)


@pytest.mark.parametrize("t", sorted(U_LOG))
def test_log_densities_match_reference(t):
    phi = bn.log_stable(0.4, 0.3)
    assert bn.potential_density(phi, t) == pytest.approx(U_LOG[t], rel=1e-5)
    assert bn.levy_density(phi, t) == pytest.approx(MU_LOG[t], rel=1e-5)


def test_inversion_of_known_transform():
    assert bn.invert_laplace(lambda z: 1 / (z + 1), 0.7) == pytest.approx(math.exp(-0.7), rel=1e-6)
    with pytest.raises(bn.DomainError):
        bn.invert_laplace(lambda z: 1 / z, -1.0)


@given(s=indices, lam=positive)
def test_conjugate_product_is_identity(s, lam):
    pair = bn.conjugate(bn.stable(s))
    assert pair.product(lam) == pytest.approx(lam, rel=1e-12)


def test_generic_conjugate_product():
    pair = bn.conjugate(bn.log_stable(0.4, 0.3))
    lam = np.logspace(-2, 3, 7)
    assert np.allclose(pair.product(lam), lam, rtol=1e-12)


@settings(max_examples=30)
@given(s=indices, t=st.floats(min_value=1e-2, max_value=1e2))
def test_stable_densities_below_bounds(s, t):
    phi = bn.stable(s)
    assert bn.levy_density(phi, t) <= bn.levy_bound(phi, t) * (1 + 1e-12)
    assert bn.potential_density(phi, t) <= bn.potential_bound(phi, t) * (1 + 1e-12)


@settings(max_examples=30)
@given(s=indices, lam=positive, x=positive)
def test_phi_is_increasing_and_concave(s, lam, x):
    phi = bn.stable(s)
    assert bn.phi_eval(phi, lam + x) >= bn.phi_eval(phi, lam)
    assert bn.phi_prime(phi, lam + x) <= bn.phi_prime(phi, lam) * (1 + 1e-12)


def test_phi_prime_matches_difference_quotient():
    phi = bn.log_stable(0.4, 0.3)
    lam, h = 3.0, 1e-6
    fd = (bn.phi_eval(phi, lam + h) - bn.phi_eval(phi, lam - h)) / (2 * h)
    assert bn.phi_prime(phi, lam) == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("s", [0.0, 1.0, -0.2, 1.5])
def test_rejects_bad_index(s):
    with pytest.raises(bn.DomainError):
        bn.stable(s)


def test_identity_has_no_levy_measure():
    with pytest.raises(bn.DomainError):
        bn.levy_density(bn.identity(), 1.0)
    with pytest.raises(bn.DomainError):
        bn.phi_eval(bn.stable(0.5), -1.0)


def test_scaling_exponents_of_stable():
    rep = bn.verify_wsc(bn.stable(0.3))
    assert rep.delta1_hat == pytest.approx(0.3, abs=1e-9)
    assert rep.delta2_hat == pytest.approx(0.3, abs=1e-9)
    assert rep.global_scaling_ok


def test_scaling_exponents_bracket_sum():
    rep = bn.verify_wsc(bn.stable_sum([0.5, 0.5], [0.3, 0.7]))
    assert 0.3 - 1e-9 <= rep.delta1_hat <= rep.delta2_hat <= 0.7 + 1e-9
    declared = bn.with_scaling(bn.stable_sum([0.5, 0.5], [0.3, 0.7]))
    assert bn.verify_wsc(declared).brackets


@pytest.mark.parametrize("text", ["stable:0.5", "sum:0.5@0.3,0.5@0.7", "log:0.4,0.3", "identity"])
def test_text_round_trip(text):
    phi = bn.parse_phi(text)
    back = bn.from_text(bn.to_text(phi))
    assert back == phi
    assert bn.parse_phi(bn.to_text(phi)) == phi


def test_parse_rejects_garbage():
    with pytest.raises(bn.DomainError):
        bn.parse_phi("gamma:1")
