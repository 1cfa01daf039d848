"""Acceptance criteria 1-10, each checked at its stated tolerance.

Run with pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly: python3 tests/test_acceptance.py
"""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (bs_call, fractional_integral, heston_call, heston_riccati_ode,  # noqa: E402
                     resolvent_closed_form)

from affvol import kernels as kn  # noqa: E402
from affvol.kernels import TimeGrid  # noqa: E402
from affvol.mittag_leffler import mittag_leffler  # noqa: E402
from affvol.model import AffineParams, HestonParams, StateSpace, heston_to_affine  # noqa: E402
from affvol.pricing import mc_price, price_european  # noqa: E402
from affvol.resolvents import resolvent_second_kind, second_kind_residual  # noqa: E402
from affvol.riccati import TransformInputs, solve_riccati, solve_riccati_heston  # noqa: E402
from affvol.simulate import mc_functional, ou_covariance, simulate_heston, simulate_ou_exact  # noqa: E402
from affvol.transform import transform_at_zero, unconditional_mean  # noqa: E402

REPORT: dict = {}


def record(num, ok, detail):
    REPORT[num] = f"{'PASS' if ok else 'FAIL'}  criterion {num:2d}: {detail}"
    return ok


# ---------------------------------------------------------------- criterion 1

ROWS = {
    "constant": kn.Constant(1.0),
    "fractional": kn.Fractional(1.0, 0.75),
    "exponential": kn.Exponential(1.0, 2.0),
    "gamma": kn.GammaKernel(1.0, 0.75, 2.0),
}


def criterion_1():
    g = TimeGrid(1.0, 1000)
    t0 = time.perf_counter()
    sols = {name: resolvent_second_kind(k, g) for name, k in ROWS.items()}
    elapsed = time.perf_counter() - t0
    errs, orders = {}, {}
    for name, k in ROWS.items():
        ref = resolvent_closed_form(name, g.nodes[1:], c=1.0, alpha=0.75, lam=2.0)
        errs[name] = float(np.max(np.abs(sols[name].values[1:] - ref)))
        res = [second_kind_residual(k, resolvent_second_kind(k, TimeGrid(1.0, n))) for n in (100, 200, 400)]
        if max(res) < 1e-12:
            orders[name] = "exact"
        else:
            orders[name] = float(-np.polyfit(np.log([100, 200, 400]), np.log(res), 1)[0])
    ok_err = all(e <= 2e-3 for e in errs.values())
    ok_ord = all(o == "exact" or o >= 0.9 for o in orders.values())
    ok = ok_err and ok_ord and elapsed < 5.0
    detail = ", ".join(f"{n}: err {errs[n]:.1e} order {orders[n] if isinstance(orders[n], str) else f'{orders[n]:.2f}'}"
                       for n in ROWS)
    return record(1, ok, f"{detail}; {elapsed:.2f} s")


# ---------------------------------------------------------------- criterion 2

def criterion_2():
    x = np.linspace(-30.0, 5.0, 701)
    e1 = mittag_leffler(1.0, 1.0, x).real
    e2 = mittag_leffler(2.0, 1.0, x).real
    ref2 = np.where(x >= 0, np.cosh(np.sqrt(np.abs(x))), np.cos(np.sqrt(np.abs(x))))
    r1 = float(np.max(np.abs(e1 / np.exp(x) - 1)))
    r2 = float(np.max(np.abs(e2 / ref2 - 1)))
    from scipy.special import rgamma
    r0 = max(abs(mittag_leffler(a, b, 0.0) - rgamma(b)) for a in (0.5, 0.75, 1.0, 1.5, 2.0)
             for b in (0.5, 0.75, 1.0, 2.0, 3.5))
    ok = r1 <= 1e-12 and r2 <= 1e-12 and r0 <= 1e-14
    return record(2, ok, f"E_1,1 rel {r1:.1e}, E_2,1 rel {r2:.1e}, E(0) abs {r0:.1e}")


# ---------------------------------------------------------------- criterion 3

def criterion_3():
    kappa, theta, sigma, rho, v0 = 1.5, 0.05, 0.5, -0.7, 0.04
    h = HestonParams(1.0, v0, kappa, theta, sigma, rho, kn.Constant(1.0))
    g = TimeGrid(1.0, 1000)
    U1 = np.array([1j, 2j, 0.5j])
    t0 = time.perf_counter()
    sol = solve_riccati_heston(h, TransformInputs(np.stack([U1, 0 * U1], 1), None, 1.0), g)
    tr = transform_at_zero([0.0, v0], sol, heston_to_affine(h))
    elapsed = time.perf_counter() - t0
    e_psi = e_phi = e_tr = 0.0
    for j, u1 in enumerate(U1):
        t, psi2, ipsi2 = heston_riccati_ode(u1, 0j, 1.0, kappa, sigma, rho, g.n_steps + 1)
        e_psi = max(e_psi, float(np.abs(sol.psi[j, :, 1] - psi2).max()))
        e_phi = max(e_phi, float(np.abs(sol.phi[j] - kappa * theta * ipsi2).max()))
        e_tr = max(e_tr, abs(tr[j] - np.exp(kappa * theta * ipsi2[-1] + psi2[-1] * v0)))
    ok = e_psi <= 1e-5 and e_phi <= 1e-5 and e_tr <= 1e-4 and elapsed < 10.0
    return record(3, ok, f"psi_2 {e_psi:.1e}, phi {e_phi:.1e}, transform {e_tr:.1e}; {elapsed:.2f} s")


# ---------------------------------------------------------------- criterion 4

def _random_scalar_kernel(rng):
    fam = rng.integers(4)
    c = rng.uniform(0.5, 2.0)
    alpha = rng.uniform(0.55, 1.0)
    lam = rng.uniform(0.0, 2.0)
    return [kn.Constant(c), kn.Fractional(c, alpha), kn.Exponential(c, lam), kn.GammaKernel(c, alpha, lam)][fam]


def sweep_configs(seed=2024):
    """25 orthant and 25 Heston configurations satisfying the sign hypotheses."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(25):
        d = int(rng.integers(1, 4))
        sig = rng.uniform(0.1, 2.0, d)
        A = np.zeros((d + 1, d, d))
        for i in range(d):
            A[i + 1, i, i] = sig[i] ** 2
        B = rng.uniform(0.0, 0.5, (d, d))
        np.fill_diagonal(B, rng.uniform(-2.0, 0.5, d))
        p = AffineParams(A, rng.uniform(0, 1, d), B, StateSpace.ORTHANT)
        k = kn.DiagonalMatrix(tuple(_random_scalar_kernel(rng) for _ in range(d)))
        re = 0.0 if rng.random() < 1 / 3 else -rng.uniform(0, 3, d)
        u = re + 1j * rng.uniform(-5, 5, d)
        f = None if rng.random() < 0.5 else -rng.uniform(0, 1, d) + 1j * rng.uniform(-2, 2, d)
        out.append(("orthant", k, p, TransformInputs(u, f, 1.0), None))
    for _ in range(25):
        h = HestonParams(1.0, rng.uniform(0.01, 0.2), rng.uniform(0, 3), rng.uniform(0.01, 0.2),
                         rng.uniform(0.05, 1.5), rng.uniform(-1, 1), kn.Fractional(1.0, rng.uniform(0.55, 1.0)))
        re2 = 0.0 if rng.random() < 1 / 3 else -rng.uniform(0, 1)
        u = np.array([rng.uniform(0, 1) + 1j * rng.uniform(-10, 10), re2 + 1j * rng.uniform(-3, 3)])
        out.append(("heston", None, None, TransformInputs(u, None, 1.0), h))
    return out


def criterion_4():
    g = TimeGrid(1.0, 400)
    worst, blowups = -np.inf, 0
    for kind, k, p, inp, h in sweep_configs():
        if kind == "heston":
            sol = solve_riccati_heston(h, inp, g)
            vals = sol.psi[:, 1].real
        else:
            sol = solve_riccati(k, p, inp, g)
            vals = sol.psi.real
        if not sol.is_global:
            blowups += 1
            continue
        worst = max(worst, float(np.max(vals)))
    ok = worst <= 1e-9 and blowups == 0
    return record(4, ok, f"50 configurations, max Re psi {worst:.1e}, blow-ups {blowups}")


# ---------------------------------------------------------------- criterion 5

ROUGH = HestonParams(1.0, 0.04, 1.0, 0.04, 0.3, -0.7, kn.Fractional(1.0, 0.6))


def criterion_5():
    t0 = time.perf_counter()
    g = TimeGrid(1.0, 500)
    ens = simulate_heston(ROUGH, g, 100_000, seed=42, store="terminal")
    devs = []
    for v in (0.5, 1.0, 2.0):
        u = np.array([1j * v, 0.0])
        sol = solve_riccati_heston(ROUGH, TransformInputs(u, None, 1.0), g)
        tr = transform_at_zero([0.0, ROUGH.v0], sol, heston_to_affine(ROUGH))
        est, se = mc_functional(ens, TransformInputs(u, None, 1.0))
        devs.append(abs(est - tr) / se)
    elapsed = time.perf_counter() - t0
    ok = max(devs) <= 3.0 and elapsed < 120.0
    return record(5, ok, "deviations " + ", ".join(f"{d:.2f}" for d in devs) + f" SE; {elapsed:.1f} s")


# ---------------------------------------------------------------- criterion 6

def ou_model():
    k = kn.DiagonalMatrix((kn.Fractional(1.0, 0.7), kn.GammaKernel(1.0, 0.8, 1.0)))
    A = np.zeros((3, 2, 2))
    A[0] = [[1.0, 0.3], [0.3, 0.5]]
    p = AffineParams(A, [0.1, -0.2], [[-1.0, 0.2], [0.1, -0.5]], StateSpace.REAL)
    return k, p, np.array([0.5, -0.3])


def criterion_6():
    k, p, x0 = ou_model()
    n = 100_000
    g = TimeGrid(1.0, 40)
    ens = simulate_ou_exact(k, p, x0, g, n, seed=42)
    idx = np.arange(5, 41, 5)
    m = unconditional_mean(k, p, x0, g).values[idx].ravel()
    C = ou_covariance(k, p, g).reshape(40, 2, 40, 2)[idx - 1][:, :, idx - 1].reshape(16, 16)
    X = ens.data[:, idx].reshape(n, 16)
    sd = np.sqrt(np.diag(C))
    em = float(np.max(np.abs(X.mean(axis=0) - m) / sd))
    ec = float(np.max(np.abs(np.cov(X, rowvar=False) - C) / np.outer(sd, sd)))
    bound = 4.0 / np.sqrt(n)
    ok = em <= bound and ec <= bound
    return record(6, ok, f"mean {em:.2e}, covariance {ec:.2e}, bound {bound:.2e}")


# ---------------------------------------------------------------- criterion 7

def criterion_7():
    hs = [h for kind, _, _, _, h in sweep_configs() if kind == "heston"][:10]
    devs = []
    g = TimeGrid(1.0, 200)
    for h in hs:
        ens = simulate_heston(h, g, 100_000, seed=42, store="terminal")
        s = np.exp(ens.terminal()[:, 0])
        devs.append(abs(s.mean() - h.s0) / (s.std(ddof=1) / np.sqrt(s.size)))
    ok = max(devs) <= 3.0
    return record(7, ok, f"10 configurations, max |mean S_T - S0| = {max(devs):.2f} SE")


# ---------------------------------------------------------------- criterion 8

def criterion_8():
    K = np.array([80.0, 90.0, 100.0, 110.0, 120.0])
    bs = HestonParams(100.0, 0.04, 1.0, 0.04, 0.0, -0.5, kn.Fractional(1.0, 0.6))
    e_bs = float(np.max(np.abs(price_european(bs, K, 1.0) / bs_call(100.0, K, 1.0, 0.2) - 1)))
    hr = HestonParams(100.0, 0.04, 1.0, 0.04, 0.3, -0.7, kn.Fractional(1.0, 0.6))
    c = price_european(hr, K, 1.0, "call")
    p = price_european(hr, K, 1.0, "put")
    e_par = float(np.max(np.abs(c - p - (hr.s0 - K)))) / hr.s0
    m, se = mc_price(hr, K, 1.0, "call", n_paths=100_000, steps=500, seed=42)
    e_mc = float(np.max(np.abs(c - m) / se))
    hc = HestonParams(100.0, 0.04, 1.5, 0.05, 0.5, -0.7, kn.Constant(1.0))
    ref = np.array([heston_call(100.0, k, 1.0, 0.04, 1.5, 0.05, 0.5, -0.7) for k in K])
    e_cl = float(np.max(np.abs(price_european(hc, K, 1.0) / ref - 1)))
    ok = e_bs <= 1e-6 and e_par <= 1e-8 and e_mc <= 3.0 and e_cl <= 1e-5
    return record(8, ok, f"Black-Scholes rel {e_bs:.1e}, parity {e_par:.1e} S0, MC {e_mc:.2f} SE, "
                         f"classical rel {e_cl:.1e}")


# ---------------------------------------------------------------- criterion 9

def criterion_9():
    alpha = ROUGH.kernel.alpha
    g = TimeGrid(1.0, 1000)
    sol = solve_riccati_heston(ROUGH, TransformInputs(np.array([1j, 0.0]), None, 1.0), g)
    ref = fractional_integral(sol.psi[:, 1], g.dt, 1.0 - alpha)
    err = float(np.max(np.abs(sol.chi[:, 1] - ref)))
    tol = 5 * g.dt ** min(alpha, 1 - alpha)
    return record(9, err <= tol, f"max |chi_2 - I^(1-alpha) psi_2| {err:.1e}, tol {tol:.1e}")


# --------------------------------------------------------------- criterion 10

HESTON_TOML = """[heston]
s0 = 100.0
v0 = 0.04
kappa = 1.0
theta = 0.04
sigma = 0.3
rho = -0.7
kernel = { kind = "fractional", c = 1.0, alpha = 0.6 }

[run]
steps = 50
paths = 3000
seed = 7
"""

ORTHANT_TOML = """[affine]
state_space = "orthant"
A = [[[0.0, 0.0], [0.0, 0.0]], [[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.8]]]
b0 = [0.3, 0.2]
B = [[-1.0, 0.2], [0.1, -0.5]]
x0 = [0.2, 0.1]
kernel = { kind = "diagonal", entries = [{ kind = "fractional", alpha = 0.7 }, { kind = "constant" }] }

[run]
steps = 50
paths = 2500
seed = 11
"""


def _cli(args, threads, cwd):
    env = dict(os.environ, NUMBA_NUM_THREADS="8", AVL_THREADS=str(threads), PYTHONWARNINGS="ignore")
    r = subprocess.run([sys.executable, "-m", "affvol.cli", *args], cwd=cwd, env=env,
                       capture_output=True, text=True, timeout=600)
    if r.returncode != 0:
        raise RuntimeError(r.stderr)
    return r


def criterion_10():
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        (d / "heston.toml").write_text(HESTON_TOML)
        (d / "orthant.toml").write_text(ORTHANT_TOML)
        blobs = {}
        for n in (1, 2, 8):
            _cli(["simulate", "--model", "heston.toml", "--out-paths", f"h{n}.csv"], n, d)
            _cli(["simulate", "--model", "orthant.toml", "--out-paths", f"o{n}.csv"], n, d)
            _cli(["price", "--model", "heston.toml", "--strikes", "90,100,110", "--out", f"p{n}.csv"], n, d)
            blobs[n] = [(d / f"{x}{n}.csv").read_bytes() for x in ("h", "o", "p")]
        same = all(blobs[n] == blobs[1] for n in (2, 8))
        sizes = ", ".join(str(len(b)) for b in blobs[1])
    return record(10, same, f"paths and price CSVs identical across 1, 2, 8 threads ({sizes} bytes)")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


@pytest.mark.parametrize("crit", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 11)])
def test_acceptance(crit):
    ok = crit()
    num = CRITERIA.index(crit) + 1
    print(REPORT[num])
    assert ok, REPORT[num]


if __name__ == "__main__":
    failed = 0
    for crit in CRITERIA:
        try:
            ok = crit()
        except Exception as e:  # report and continue
            num = CRITERIA.index(crit) + 1
            record(num, False, f"error: {e!r}")
            ok = False
        failed += not ok
        print(REPORT[CRITERIA.index(crit) + 1], flush=True)
    sys.exit(1 if failed else 0)
