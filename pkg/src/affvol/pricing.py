"""European option prices under the Volterra Heston model.

Prices come from the characteristic function of log S_T on a contour
Re u_1 = damping inside (0, 1), where the Riccati solution is known to be
global. With zero rates and dividends,

    call = S0 - K / pi * int_0^inf Re[ e^{-i v k + damping k} Phi(damping - i v)
                                       / ((v + i damping)^2 - i (v + i damping)) ] dv,

k = log(S0 / K) and Phi(u_1) = E[(S_T / S0)^{u_1}]. Puts use the same
integral, so put-call parity holds to rounding.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .kernels import TimeGrid
from .model import HestonParams, heston_to_affine
from .riccati import BlowUpError, TransformInputs, solve_riccati_heston
from .simulate import simulate_heston
from .transform import y_zero

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class PricingError(ArithmeticError):
    """The transform is unavailable on the requested contour."""


class _ContourCF:
    """Phi(damping - i v) evaluated in batches and cached by v."""

    def __init__(self, h: HestonParams, T: float, steps: int, damping: float):
        self.h, self.T, self.damping = h, T, damping
        self.g = TimeGrid(T, steps)
        self.p = heston_to_affine(h)
        self.cache = {}

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        todo = np.unique([x for x in v if x not in self.cache])
        if todo.size:
            u = np.stack([self.damping - 1j * todo, np.zeros_like(todo)], axis=1)
            sol = solve_riccati_heston(self.h, TransformInputs(u, None, self.T), self.g)
            if not sol.is_global:
                raise PricingError(f"Riccati blow-up on the contour Re u_1 = {self.damping}; "
                                   "try a different damping in (0, 1)")
            y = np.exp(y_zero(np.array([0.0, self.h.v0]), sol, self.p))
            if not np.all(np.isfinite(y)):
                raise PricingError("non-finite transform on the contour; try a different damping in (0, 1)")
            self.cache.update(zip(todo.tolist(), y))
        return np.array([self.cache[x] for x in v.tolist()])


def _integrand(cf, v, logm, damping):
    """Integrand at frequencies v (m,) for log-moneyness values logm (k,), shape (k, m)."""
    z = v + 1j * damping
    den = z * z - 1j * z
    ph = np.exp(-1j * np.outer(logm, v) + damping * logm[:, None])
    return (ph * cf(v)[None, :] / den[None, :]).real


def _gl_nodes(a, b):
    return 0.5 * (b - a) * _GL_X + 0.5 * (a + b), 0.5 * (b - a) * _GL_W


def _lewis_integral(cf, logm, damping, width, v_max, tol, max_depth=12, chunk=8):
    """Adaptive Gauss-Legendre integral over [0, v_cut], one value per strike.

    Panels are accepted when the 8-point rule on the panel and on its two
    halves agree to tol; otherwise the halves are refined. Panels are added
    until the integrand falls below tol at the end of a chunk or v_max is
    reached.
    """
    total = np.zeros(logm.shape[0])
    start = 0.0
    info = {"panels": 0, "v_cut": 0.0, "truncated": False}
    while start < v_max:
        edges = np.minimum(start + width * np.arange(chunk + 1), v_max)
        pending = [(a, b, 0) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        tail = 0.0
        while pending:
            pts = []
            for a, b, _ in pending:
                m = 0.5 * (a + b)
                pts += [_gl_nodes(a, b)[0], _gl_nodes(a, m)[0], _gl_nodes(m, b)[0]]
            cf(np.concatenate(pts))
            nxt = []
            for a, b, depth in pending:
                m = 0.5 * (a + b)
                xf, wf = _gl_nodes(a, b)
                xl, wl = _gl_nodes(a, m)
                xr, wr = _gl_nodes(m, b)
                i1 = _integrand(cf, xf, logm, damping) @ wf
                fl, fr = _integrand(cf, xl, logm, damping), _integrand(cf, xr, logm, damping)
                i2 = fl @ wl + fr @ wr
                if np.max(np.abs(i1 - i2)) <= tol or depth >= max_depth:
                    total += i2
                    info["panels"] += 1
                    if b == edges[-1]:
                        tail = max(tail, float(np.max(np.abs(fr))))
                else:
                    nxt += [(a, m, depth + 1), (m, b, depth + 1)]
            pending = nxt
        start = edges[-1]
        info["v_cut"] = start
        if tail < tol:
            break
    else:
        info["truncated"] = True
    return total, info


def _check_kind(kind):
    if kind not in ("call", "put"):
        raise ValueError("kind must be 'call' or 'put'")


def price_european(h: HestonParams, strike, T: float, kind: str = "call", steps: int = 500,
                   damping: float = 0.5, tol: float = 1e-10, return_info: bool = False):
    """Fourier price of European calls or puts; strike may be a scalar or an array.

    All strikes share one cached family of Riccati solutions along the
    contour Re u_1 = damping, which must lie strictly inside (0, 1).
    Frequency panels have width about 1/sqrt(V T) and the frequency range
    is capped at 200/sqrt(theta T).
    """
    _check_kind(kind)
    if not (0.0 < damping < 1.0):
        raise ValueError("damping must lie strictly inside (0, 1); the transform is only "
                         "guaranteed on Re u_1 in [0, 1]")
    if not (np.isfinite(T) and T > 0):
        raise ValueError("T must be positive")
    K = np.atleast_1d(np.asarray(strike, dtype=float))
    if np.any(~np.isfinite(K)) or np.any(K <= 0):
        raise ValueError("strikes must be positive")
    s0 = h.s0
    info = {"panels": 0, "v_cut": 0.0, "truncated": False}
    if h.v0 == 0 and h.kappa * h.theta == 0:
        call = np.maximum(s0 - K, 0.0)
    else:
        logm = np.log(s0 / K)
        vbar = max(h.theta, h.v0)
        v_max = 200.0 / np.sqrt(max(h.theta, 1e-300) * T) if h.theta > 0 else 200.0 / np.sqrt(vbar * T)
        width = max(0.5, 1.0 / np.sqrt(vbar * T))
        cf = _ContourCF(h, T, steps, damping)
        scale = np.max(K) / np.pi
        integral, info = _lewis_integral(cf, logm, damping, width, v_max, tol * s0 / scale)
        call = s0 - K / np.pi * integral
    out = call if kind == "call" else call - s0 + K
    out = out if np.ndim(strike) else float(out[0])
    return (out, info) if return_info else out


def black_scholes(s0, strike, T, vol, kind: str = "call"):
    """Black-Scholes price with zero rates."""
    _check_kind(kind)
    s0, K = np.asarray(s0, dtype=float), np.asarray(strike, dtype=float)
    sd = np.asarray(vol, dtype=float) * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(s0 / K) / sd + 0.5 * sd
        call = s0 * ndtr(d1) - K * ndtr(d1 - sd)
    call = np.where(sd > 0, call, np.maximum(s0 - K, 0.0))
    out = call if kind == "call" else call - s0 + K
    return out if out.ndim else float(out)


def implied_vol(price: float, s0: float, strike: float, T: float, kind: str = "call", vol_max: float = 20.0) -> float:
    """Black-Scholes implied volatility by bracketed root search (xtol 1e-12)."""
    _check_kind(kind)
    if kind == "put":
        price = price + s0 - strike
    lo = max(s0 - strike, 0.0)
    slack = 1e-13 * s0
    if not (np.isfinite(price) and lo - slack <= price <= s0 + slack):
        raise ValueError(f"price {price!r} outside the no-arbitrage bounds [{lo!r}, {s0!r}]")
    if price <= lo + slack:
        return 0.0
    if price >= s0:
        raise ValueError("a call price equal to S0 has no finite implied volatility")
    f = lambda s: black_scholes(s0, strike, T, s) - price
    hi = 1.0
    while f(hi) < 0:
        hi *= 2
        if hi > vol_max:
            raise ValueError("implied volatility exceeds the search bracket")
    return float(brentq(f, 1e-14, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500))


def classical_heston_riccati(h: HestonParams, u1, t):
    """Closed-form psi_2(t) and phi(t) of the classical Heston model for u = (u1, 0).

    Uses the branch with g = (beta - d) / (beta + d), which stays continuous
    in t. The kernel of h is ignored.
    """
    u1 = complex(u1)
    t = np.asarray(t, dtype=float)
    q = 0.5 * (u1 * u1 - u1)
    beta = h.kappa - h.rho * h.sigma * u1
    kt = h.kappa * h.theta
    if h.sigma == 0:
        if beta == 0:
            return q * t, kt * q * t * t / 2
        e = -np.expm1(-beta * t)
        return q / beta * e, kt * q / beta * (t - e / beta)
    s2 = h.sigma ** 2
    d = np.sqrt(beta * beta - 2 * s2 * q)
    g = (beta - d) / (beta + d)
    e = np.exp(-d * t)
    psi = (beta - d) / s2 * (1 - e) / (1 - g * e)
    phi = kt / s2 * ((beta - d) * t - 2 * np.log((1 - g * e) / (1 - g)))
    return psi, phi


def classical_heston_call(h: HestonParams, strike, T: float) -> np.ndarray:
    """Classical Heston call from the closed-form transform and adaptive quadrature of the same contour integral."""
    from scipy.integrate import quad
    K = np.atleast_1d(np.asarray(strike, dtype=float))

    def phi(v):
        ps, ph = classical_heston_riccati(h, 0.5 - 1j * v, T)
        return np.exp(ph + ps * h.v0)

    out = []
    for k in K:
        x = np.log(h.s0 / k)
        f = lambda v: (np.exp(-1j * v * x + 0.5 * x) * phi(v) / (v * v + 0.25)).real
        out.append(h.s0 - k / np.pi * quad(f, 0, np.inf, limit=1000, epsabs=1e-14, epsrel=1e-13)[0])
    out = np.array(out)
    return out if np.ndim(strike) else float(out[0])


def mc_price(h: HestonParams, strike, T: float, kind: str = "call", n_paths: int = 10_000, steps: int = 500,
             seed: int = 42, scheme: str = "ivi", threads=None):
    """Monte Carlo price and standard error per strike from simulated terminal prices."""
    _check_kind(kind)
    K = np.atleast_1d(np.asarray(strike, dtype=float))
    ens = simulate_heston(h, TimeGrid(T, steps), n_paths, seed=seed, store="terminal", scheme=scheme, threads=threads)
    sT = np.exp(ens.terminal()[:, 0])
    pay = np.maximum(sT[:, None] - K[None], 0.0) if kind == "call" else np.maximum(K[None] - sT[:, None], 0.0)
    price = pay.mean(axis=0)
    se = pay.std(axis=0, ddof=1) / np.sqrt(n_paths)
    if np.ndim(strike) == 0:
        return float(price[0]), float(se[0])
    return price, se


__all__ = ["PricingError", "BlowUpError", "price_european", "black_scholes", "implied_vol", "mc_price",
           "classical_heston_riccati", "classical_heston_call"]
