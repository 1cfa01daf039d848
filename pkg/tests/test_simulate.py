import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma

from affvol import kernels as kn
from affvol.kernels import TimeGrid
from affvol.model import AffineParams, HestonParams, StateSpace
from affvol.riccati import TransformInputs
from affvol.simulate import (block_normals, holder_diagnostic, mc_functional, ou_covariance, simulate_heston,
                             simulate_ou_exact, simulate_volterra_euler)


def real_1d(a0, b, b0=0.0):
    return AffineParams(np.array([[[a0]], [[0.0]]]), [b0], [[b]], StateSpace.REAL)


def cir(kappa, theta, sigma):
    return AffineParams(np.array([[[0.0]], [[sigma ** 2]]]), [kappa * theta], [[-kappa]], StateSpace.ORTHANT)


def test_block_normals_deterministic():
    a = block_normals(42, 3, (4, 5))
    np.testing.assert_array_equal(a, block_normals(42, 3, (4, 5)))
    assert not np.array_equal(a, block_normals(42, 4, (4, 5)))
    assert not np.array_equal(a, block_normals(43, 3, (4, 5)))


@pytest.mark.parametrize("scheme", ["ivi", "euler"])
def test_heston_reproducible(scheme):
    h = HestonParams(100, 0.04, 1.0, 0.04, 0.3, -0.7, kn.Fractional(1, 0.7))
    g = TimeGrid(1.0, 50)
    a = simulate_heston(h, g, 300, seed=5, scheme=scheme)
    b = simulate_heston(h, g, 300, seed=5, scheme=scheme, threads=1)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, simulate_heston(h, g, 300, seed=6, scheme=scheme).data)
    # the first paths do not depend on how many paths are drawn
    np.testing.assert_array_equal(simulate_heston(h, g, 100, seed=5, scheme=scheme).data, a.data[:100])


def test_terminal_storage_matches_full():
    h = HestonParams(100, 0.04, 1.0, 0.04, 0.3, -0.7, kn.Fractional(1, 0.7))
    g = TimeGrid(1.0, 40)
    full = simulate_heston(h, g, 200, seed=1)
    term = simulate_heston(h, g, 200, seed=1, store="terminal")
    np.testing.assert_array_equal(term.terminal(), full.data[:, -1])
    assert not term.full


@pytest.mark.parametrize("scheme", ["ivi", "euler"])
def test_black_scholes_degeneration(scheme):
    theta, T = 0.04, 1.0
    h = HestonParams(100, theta, 1.5, theta, 0.0, -0.5, kn.Fractional(1, 0.7))
    ens = simulate_heston(h, TimeGrid(T, 50), 20000, seed=3, scheme=scheme)
    np.testing.assert_allclose(ens.data[:, :, 1], theta, rtol=1e-12)
    x = ens.terminal()[:, 0]
    n = x.size
    mean, var = np.log(100) - theta * T / 2, theta * T
    assert abs(x.mean() - mean) <= 3 * np.sqrt(var / n)
    assert abs(x.var(ddof=1) - var) <= 3 * var * np.sqrt(2 / (n - 1))


def test_heston_martingale_small():
    h = HestonParams(100, 0.04, 1.0, 0.04, 0.5, -0.7, kn.Fractional(1, 0.65))
    s = np.exp(simulate_heston(h, TimeGrid(1.0, 100), 20000, seed=9, store="terminal").terminal()[:, 0])
    assert abs(s.mean() - 100) <= 3 * s.std(ddof=1) / np.sqrt(s.size)


def test_heston_rho_zero_independence():
    h = HestonParams(100, 0.04, 1.0, 0.04, 0.3, 0.0)
    ens = simulate_heston(h, TimeGrid(1.0, 50), 20000, seed=4, scheme="euler")
    dx = np.diff(ens.data[:, :, 0], axis=1)[:, 10]
    dv = np.diff(ens.data[:, :, 1], axis=1)[:, 10]
    r = np.corrcoef(dx, dv)[0, 1]
    assert abs(r) <= 3 / np.sqrt(dx.size)


def test_deterministic_euler_matches_ode():
    p = real_1d(0.0, -1.5, b0=0.3)
    g = TimeGrid(1.0, 1000)
    ens = simulate_volterra_euler(kn.Constant(1.0), p, [2.0], g, 3, seed=1)
    exact = 0.2 + 1.8 * np.exp(-1.5 * g.nodes)
    for path in ens.data[:, :, 0]:
        np.testing.assert_allclose(path, exact, atol=2e-3)
    np.testing.assert_array_equal(ens.data[0], ens.data[2])


def test_brownian_variance():
    ens = simulate_volterra_euler(kn.Constant(1.0), real_1d(0.7, 0.0), [0.0], TimeGrid(2.0, 20), 20000, seed=2)
    x = ens.terminal()[:, 0]
    var = 0.7 * 2.0
    assert abs(x.var(ddof=1) - var) <= 3 * var * np.sqrt(2 / (x.size - 1))


def test_cir_mean():
    kappa, theta, sigma, v0 = 1.5, 0.04, 0.4, 0.09
    ens = simulate_volterra_euler(kn.Constant(1.0), cir(kappa, theta, sigma), [v0], TimeGrid(1.0, 200), 20000, seed=8)
    x = ens.terminal()[:, 0]
    ref = theta + (v0 - theta) * np.exp(-kappa)
    assert abs(x.mean() - ref) <= 3 * x.std(ddof=1) / np.sqrt(x.size) + 1e-3


def test_ou_covariance_closed_forms():
    g = TimeGrid(1.0, 50)
    t = g.nodes[1:]
    cov = ou_covariance(kn.Constant(1.0), real_1d(1.0, 0.0), g)
    np.testing.assert_allclose(cov, np.minimum.outer(t, t), atol=1e-12)
    a = 0.7
    var = np.diag(ou_covariance(kn.Fractional(1, a), real_1d(1.0, 0.0), g))
    np.testing.assert_allclose(var, t ** (2 * a - 1) / ((2 * a - 1) * gamma(a) ** 2), rtol=1e-6)
    # with B != 0 the grid E_B carries an O(dt^2) error into the covariance
    kappa = 2.0
    errs = []
    for n in (100, 200):
        gg = TimeGrid(5.0, n)
        var = np.diag(ou_covariance(kn.Constant(1.0), real_1d(1.0, -kappa), gg))
        errs.append(np.abs(var / (-np.expm1(-2 * kappa * gg.nodes[1:]) / (2 * kappa)) - 1).max())
    assert errs[1] < 1e-3 and errs[1] < 0.3 * errs[0]
    assert abs(var[-1] - 1 / (2 * kappa)) < 1e-3


def test_ou_exact_sampling_matches_covariance():
    g = TimeGrid(1.0, 10)
    p = real_1d(0.5, -1.0, b0=0.2)
    ens = simulate_ou_exact(kn.Fractional(1, 0.7), p, [1.0], g, 40000, seed=6)
    x = ens.data[:, 1:, 0]
    cov = ou_covariance(kn.Fractional(1, 0.7), p, g)
    emp = np.cov(x, rowvar=False)
    assert np.abs(emp - cov).max() <= 4 * np.abs(cov).max() / np.sqrt(x.shape[0]) * np.sqrt(2)
    with pytest.raises(ValueError):
        simulate_ou_exact(kn.Constant(1.0), cir(1, 0.04, 0.3), [0.1], g, 10)


def test_mc_functional_trivial():
    g = TimeGrid(1.0, 20)
    ens = simulate_volterra_euler(kn.Constant(1.0), real_1d(1.0, 0.0), [0.0], g, 500, seed=1)
    assert mc_functional(ens, TransformInputs([0.0])) == (1.0, 0.0)
    det = simulate_volterra_euler(kn.Constant(1.0), real_1d(0.0, -1.0, b0=0.5), [1.0], g, 4, seed=1)
    u = 0.3 - 0.2j
    est, se = mc_functional(det, TransformInputs([u], f=[[0.1]], T=1.0))
    x = det.data[0, :, 0]
    ref = np.exp(u * x[-1] + 0.1 * g.dt * (x.sum() - 0.5 * (x[0] + x[-1])))
    assert abs(est - ref) < 1e-14 and se < 1e-14
    with pytest.raises(ValueError):
        mc_functional(det, TransformInputs([u], T=2.0))


def test_holder_diagnostic():
    g = TimeGrid(1.0, 512)
    bm = simulate_volterra_euler(kn.Constant(1.0), real_1d(1.0, 0.0), [0.0], g, 400, seed=1)
    assert abs(holder_diagnostic(bm) - 0.5) <= 0.1
    rough = simulate_volterra_euler(kn.Fractional(1, 0.75), cir(1.0, 0.04, 0.3), [0.04], g, 400, seed=1)
    assert holder_diagnostic(rough) <= 0.25 + 0.1
    det = simulate_volterra_euler(kn.Constant(1.0), real_1d(0.0, -1.0, b0=0.5), [1.0], g, 3, seed=1)
    assert holder_diagnostic(det) >= 0.9
    flat = simulate_volterra_euler(kn.Constant(1.0), real_1d(0.0, 0.0), [1.0], g, 3, seed=1)
    assert np.isnan(holder_diagnostic(flat))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 300))
def test_path_prefix_property(seed, n):
    g = TimeGrid(1.0, 8)
    p = cir(1.0, 0.04, 0.5)
    a = simulate_volterra_euler(kn.Fractional(1, 0.7), p, [0.04], g, n, seed=seed)
    b = simulate_volterra_euler(kn.Fractional(1, 0.7), p, [0.04], g, n + 5, seed=seed)
    np.testing.assert_array_equal(a.data, b.data[:n])
