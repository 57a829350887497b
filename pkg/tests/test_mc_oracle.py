import math

import numpy as np
import pytest
from scipy.special import j1, jn_zeros

from phigreen import bernstein as bn
from phigreen import mc_oracle as mc
from phigreen import potentials as pt
from phigreen.kernels import KernelSet
from phigreen.spectral_domain import make_domain


@pytest.fixture(scope="module")
def ks():
    return KernelSet(bn.stable(0.5), make_domain("disk", 400), 400)


def bump(X):
    return np.exp(-(X**2).sum(axis=1) / (2 * 0.15**2))


def test_increment_laplace_transform():
    cfg = mc.PathConfig(dt=0.01, s=0.5, seed=4)
    X = mc.sample_subordinator(cfg, 200_000)
    for lam in (1.0, 10.0, 100.0):
        emp = np.exp(-lam * X)
        se = emp.std() / math.sqrt(X.size)
        assert abs(emp.mean() - math.exp(-cfg.dt * lam**0.5)) < 4 * se + 1e-4


def test_increments_are_seeded():
    cfg = mc.PathConfig(seed=9)
    a = mc.sample_subordinator(cfg, 10)
    b = mc.sample_subordinator(cfg, 10)
    assert np.array_equal(a, b) and np.all(a > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        mc.PathConfig(s=1.0)
    with pytest.raises(NotImplementedError):
        mc.PathConfig.for_phi(bn.log_stable(0.4, 0.3))
    assert mc.PathConfig.for_phi(bn.stable(0.3)).s == 0.3


def test_exit_time_law_from_centre(ks):
    # survival from the origin: sum over zeros j of J_0 of 2 exp(-t j) / (j J_1(j))
    j = jn_zeros(0, 3000)
    times = np.array([0.2, 1.0])
    ref = np.array([1 - np.sum(2 / (j * j1(j)) * np.exp(-t * j)) for t in times])
    cfg = mc.PathConfig(dt=2e-3, paths=2000, seed=2)
    emp = mc.exit_time_distribution(cfg, ks, [0.0, 0.0], times)
    se = np.sqrt(ref * (1 - ref) / cfg.paths)
    assert np.all(np.abs(emp - ref) < 4 * se + 0.01)


def test_green_potential_small_run(ks):
    x = [0.3, 0.0]
    ref = mc.spectral_green_potential(ks, bump, x)
    cfg = mc.PathConfig(dt=2e-3, paths=4000, seed=1, chunk=2000)
    est = mc.estimate_green_potential(cfg, ks, x, bump, ref)
    assert abs(est.z) < 4
    assert est.to_dict()["paths"] == 4000


def test_same_seed_same_estimate(ks):
    cfg = mc.PathConfig(dt=5e-3, paths=300, seed=7, chunk=100)
    a = mc.estimate_green_potential(cfg, ks, [0.1, 0.1], bump)
    b = mc.estimate_green_potential(cfg, ks, [0.1, 0.1], bump)
    assert a.estimate == b.estimate and math.isnan(a.z)


def test_start_and_ball_checks(ks):
    cfg = mc.PathConfig(paths=10)
    h = np.ones(ks.geom.nodes.shape[0])
    with pytest.raises(ValueError):
        mc.estimate_green_potential(cfg, ks, [1.5, 0.0], bump)
    with pytest.raises(ValueError):
        mc.verify_mean_value(cfg, ks, h, ((0.0, 0.0), 1.0), [0.1, 0.0])
    with pytest.raises(ValueError):
        mc.verify_mean_value(cfg, ks, h, ((0.0, 0.0), 0.5), [0.6, 0.0])


@pytest.mark.slow
def test_mean_value_property_full(ks):
    h = pt.poisson_kernel_field(ks, 0)
    cfg = mc.PathConfig(dt=2e-3, paths=20_000, seed=3)
    defect, se, _, _ = mc.verify_mean_value(cfg, ks, h, ((0.0, 0.0), 0.5), [0.1, 0.0])
    assert defect < 3 * se
