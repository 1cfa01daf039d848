"""Independent reference implementations used by the tests."""

from __future__ import annotations

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.special import gamma, ndtr


def bs_call(s0, k, T, vol):
    sd = vol * np.sqrt(T)
    d1 = np.log(s0 / k) / sd + 0.5 * sd
    return s0 * ndtr(d1) - k * ndtr(d1 - sd)


def heston_cf(z, T, v0, kappa, theta, sigma, rho):
    """E[exp(i z log(S_T/S0))], classical Heston, rotation-free branch."""
    b = kappa - rho * sigma * 1j * z
    d = np.sqrt(b * b + sigma ** 2 * (1j * z + z * z))
    g = (b - d) / (b + d)
    e = np.exp(-d * T)
    C = kappa * theta / sigma ** 2 * ((b - d) * T - 2.0 * np.log((1 - g * e) / (1 - g)))
    D = (b - d) / sigma ** 2 * (1 - e) / (1 - g * e)
    return np.exp(C + D * v0)


def heston_call(s0, k, T, v0, kappa, theta, sigma, rho):
    """Two-probability form of the classical Heston call price."""
    x = np.log(s0 / k)
    f0 = lambda z: heston_cf(z, T, v0, kappa, theta, sigma, rho)
    p1 = lambda z: (np.exp(1j * z * x) * f0(z - 1j) / (1j * z)).real
    p2 = lambda z: (np.exp(1j * z * x) * f0(z) / (1j * z)).real
    P1 = 0.5 + quad(p1, 0, np.inf, limit=500, epsabs=1e-13, epsrel=1e-13)[0] / np.pi
    P2 = 0.5 + quad(p2, 0, np.inf, limit=500, epsabs=1e-13, epsrel=1e-13)[0] / np.pi
    return s0 * P1 - k * P2


def heston_riccati_ode(u1, u2, T, kappa, sigma, rho, n_out):
    """psi_2 and phi/(kappa theta) of the classical Heston system by a tight ODE solve.

    psi_2' = (u1^2 - u1)/2 - kappa psi_2 + rho sigma u1 psi_2 + sigma^2 psi_2^2 / 2,
    int_psi_2' = psi_2. Returns times and (psi_2, int_0^t psi_2).
    """
    def rhs(t, y):
        p = y[0] + 1j * y[1]
        dp = 0.5 * (u1 * u1 - u1) - kappa * p + rho * sigma * u1 * p + 0.5 * sigma ** 2 * p * p
        return [dp.real, dp.imag, y[0], y[1]]

    t = np.linspace(0, T, n_out)
    s = solve_ivp(rhs, (0, T), [u2.real, u2.imag, 0.0, 0.0], t_eval=t, rtol=1e-12, atol=1e-14, method="DOP853")
    return t, s.y[0] + 1j * s.y[1], s.y[2] + 1j * s.y[3]


def ml_mp(alpha, beta, z, dps=None):
    """E_{alpha,beta}(z) by the power series in extended precision.

    The working precision covers the largest term, about exp(|z|^(1/alpha)),
    so cancellation between terms does not reach the result.
    """
    import mpmath as mp
    if dps is None:
        dps = 40 + int(abs(z) ** (1.0 / alpha) / 2.3)
    with mp.workdps(dps):
        z = mp.mpc(z)
        a, b = mp.mpf(alpha), mp.mpf(beta)
        s, n = mp.mpf(0), 0
        while True:
            term = z ** n * mp.rgamma(a * n + b)
            s += term
            if n > 10 and a * n > abs(z) ** (1 / a) + 5 and abs(term) < mp.mpf(10) ** -35:
                break
            n += 1
        return complex(s)


def resolvent_closed_form(kind, t, c=1.0, alpha=0.75, lam=2.0):
    """Second-kind resolvent R(t), t > 0, for the four closed-form kernel rows."""
    t = np.asarray(t, dtype=float)
    if kind == "constant":
        return c * np.exp(-c * t)
    if kind == "exponential":
        return c * np.exp(-(lam + c) * t)
    damp = np.exp(-lam * t) if kind == "gamma" else 1.0
    e = np.array([ml_mp(alpha, alpha, -c * x ** alpha, dps=40).real for x in t])
    return c * damp * t ** (alpha - 1) * e


def fractional_integral(vals, dt, order):
    """I^order of the piecewise-linear interpolant of node values, at every node.

    (I^a f)(t) = int_0^t (t-s)^(a-1) f(s) ds / Gamma(a), with exact weights for the
    hat functions.
    """
    n = len(vals) - 1
    a = order
    out = np.zeros(n + 1, dtype=complex)
    # integral of (t_i - s)^(a-1) over cell j times the left / right hat
    for i in range(1, n + 1):
        j = np.arange(i)
        x0, x1 = (i - j) * dt, (i - j - 1) * dt       # distances t_i - t_j, t_i - t_{j+1}
        m0 = (x0 ** a - x1 ** a) / a
        m1 = (x0 ** (a + 1) - x1 ** (a + 1)) / (a + 1)  # int (t_i - s)^a ds over the cell
        right = (x0 * m0 - m1) / dt                    # weight of f(t_{j+1})
        left = m0 - right
        out[i] = (left @ vals[:i] + right @ vals[1:i + 1]) / gamma(a)
    return out
