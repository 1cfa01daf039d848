"""Monte Carlo engines: convolution Euler for affine Volterra equations and
exact Gaussian sampling for the Volterra Ornstein-Uhlenbeck case.

Random numbers come from Philox streams, one per block of BLOCK paths,
seeded by SeedSequence([seed, block]). Each path is computed by a single
thread with a fixed operation order, so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange
from scipy import special

from . import kernels as kn
from .kernels import TimeGrid
from .model import AffineParams, HestonParams, StateSpace, diffusion_factor, heston_kernel, heston_to_affine, validate
from .riccati import TransformInputs

BLOCK = 1024


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Sample paths on a grid.

    data has shape (n_paths, len(stored), d); stored lists the node indices
    kept (all nodes by default, or only 0 and n with store="terminal").
    Variance-type coordinates are raw grid values, possibly slightly negative.
    """

    grid: TimeGrid
    n_paths: int
    data: np.ndarray
    seed: int
    scheme_tag: str
    stored: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("simulation produced non-finite values")

    @property
    def full(self) -> bool:
        return self.stored.size == self.grid.n_steps + 1

    def terminal(self) -> np.ndarray:
        if self.stored[-1] != self.grid.n_steps:
            raise ValueError("terminal node not stored")
        return self.data[:, -1]


def configure_threads(n=None) -> int:
    """Set the numba worker count from n or AVL_THREADS (capped by the pool size)."""
    if n is None:
        env = os.environ.get("AVL_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def block_normals(seed: int, block: int, shape) -> np.ndarray:
    """Standard normals of one path block from its own Philox stream."""
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), int(block)])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def _blocks(n_paths):
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        yield b, start, min(start + BLOCK, n_paths)


def _store_index(g, store):
    if store == "path":
        return np.arange(g.n_steps + 1)
    if store == "terminal":
        return np.array([0, g.n_steps])
    raise ValueError("store must be 'path' or 'terminal'")


# ------------------------------------------------------- Euler scheme

@njit(cache=True)
def _psd_root(a, out):
    # lower-triangular root of a symmetric psd matrix, zero columns on null pivots
    d = a.shape[0]
    out[:, :] = 0.0
    for j in range(d):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if s <= 1e-300:
            continue
        ljj = np.sqrt(s)
        out[j, j] = ljj
        for i in range(j + 1, d):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / ljj


@njit(parallel=True, cache=True)
def _euler_paths(x0, W, wconst, A, b0, B, pos, root0, fixed_root, z, dt, store, out):
    n_p, n, d = z.shape
    sq = np.sqrt(dt)
    for p in prange(n_p):
        dz = np.zeros((n, d))
        x = x0.copy()
        xh = np.empty(d)
        a = np.empty((d, d))
        root = root0.copy()
        s = 0
        if store[0] == 0:
            out[p, 0, :] = x
            s = 1
        for i in range(n):
            for k in range(d):
                xh[k] = max(x[k], 0.0) if pos[k] else x[k]
            if not fixed_root:
                for r in range(d):
                    for c in range(d):
                        v = A[0, r, c]
                        for k in range(d):
                            v += xh[k] * A[k + 1, r, c]
                        a[r, c] = v
                _psd_root(a, root)
            for r in range(d):
                drift = b0[r]
                for k in range(d):
                    drift += B[r, k] * xh[k]
                noise = 0.0
                for k in range(d):
                    noise += root[r, k] * z[p, i, k]
                dz[i, r] = drift * dt + noise * sq
            # X_{i+1} = X0 + sum_{j<=i} W[i-j] dz_j
            for r in range(d):
                if wconst[r]:
                    x[r] += W[0, r] * dz[i, r]
                else:
                    acc = 0.0
                    for j in range(i + 1):
                        acc += W[i - j, r] * dz[j, r]
                    x[r] = x0[r] + acc
            if s < store.size and store[s] == i + 1:
                out[p, s, :] = x
                s += 1


@njit(parallel=True, cache=True)
def _ivi_paths(x0, kappa, theta, sigma, rho, w, W, dt, zn, zu, store, out):
    # integrated-variance steps: dU from an inverse Gaussian law, dZ from the
    # linear relation dU (1 + kappa w0) = A + sigma w0 dZ
    n_p, n, _ = zn.shape
    rr = np.sqrt(max(1.0 - rho * rho, 0.0))
    a1 = 1.0 + kappa * w[0]
    sw = sigma * w[0]
    for p in prange(n_p):
        dX = np.zeros(n)
        logs = x0[0]
        v = x0[1]
        s = 0
        if store[0] == 0:
            out[p, 0, 0] = logs
            out[p, 0, 1] = v
            s = 1
        for i in range(n):
            acc = x0[1] * dt + w[0] * kappa * theta * dt
            for j in range(i):
                acc += w[i - j] * dX[j]
            A = max(acc, 0.0)
            mu = A / a1
            if sw > 0.0 and mu > 0.0:
                lam = (A / sw) ** 2
                y = zn[p, i, 0] * zn[p, i, 0]
                cand = mu + mu * mu * y / (2.0 * lam) - mu / (2.0 * lam) * np.sqrt(4.0 * mu * lam * y + mu * mu * y * y)
                dU = cand if zu[p, i] <= mu / (mu + cand) else mu * mu / cand
                dZ = (a1 * dU - A) / sw
            else:
                dU = mu
                dZ = np.sqrt(dU) * zn[p, i, 0]
            dX[i] = kappa * theta * dt - kappa * dU + sigma * dZ
            logs += -0.5 * dU + rho * dZ + rr * np.sqrt(dU) * zn[p, i, 1]
            if s < store.size and store[s] == i + 1:
                # V at the node from the cell-averaged increments
                acc = 0.0
                for j in range(i + 1):
                    acc += W[i - j] * dX[j]
                out[p, s, 0] = logs
                out[p, s, 1] = x0[1] + acc
                s += 1


def _positive_coords(p: AffineParams):
    ss = p.state_space
    d = p.d
    if ss is StateSpace.ORTHANT:
        return np.ones(d, dtype=np.bool_)
    mask = np.zeros(d, dtype=np.bool_)
    if ss is StateSpace.HESTON:
        mask[1] = True
    elif ss is StateSpace.LIFTED_HESTON:
        mask[1:] = True
    return mask


def _weights(k, g):
    """Lag weights m1/dt per component, (n, d), and flags for constant kernels."""
    ents = kn.entries(k)
    W = np.stack([kn.kernel_moments(e, g).m1 / g.dt for e in ents], axis=1)
    const = np.array([isinstance(e, kn.Constant) for e in ents], dtype=np.bool_)
    return np.ascontiguousarray(W), const


def simulate_volterra_euler(k, p: AffineParams, X0, g: TimeGrid, n_paths: int, seed: int = 42,
                            store: str = "path", threads=None) -> PathEnsemble:
    """Convolution Euler scheme for X = X0 + K * (b(X) dt + sigma(X) dW).

    X_i = X0 + sum_{j<i} (m1_{i-1-j} / dt) (b(X^_j) dt + sigma(X^_j) dW_j), where
    X^ takes positive parts of the nonnegative coordinates of the state space
    and sigma(x) is the lower-triangular root of a(x) (the fixed root of A^0
    on the whole space). Cost is O(n_paths n^2) per non-constant kernel
    entry; constant entries use a running sum.
    """
    errs = validate(p)
    if errs:
        raise ValueError("; ".join(errs))
    if len(kn.entries(k)) != p.d:
        raise ValueError("kernel and model dimensions differ")
    x0 = np.asarray(X0, dtype=float).reshape(p.d)
    n_paths = _check_paths(n_paths)
    configure_threads(threads)
    W, const = _weights(k, g)
    pos = _positive_coords(p)
    fixed = p.state_space is StateSpace.REAL
    root0 = np.ascontiguousarray(diffusion_factor(p)) if fixed else np.zeros((p.d, p.d))
    idx = _store_index(g, store)
    out = np.empty((n_paths, idx.size, p.d))
    for b, lo, hi in _blocks(n_paths):
        z = block_normals(seed, b, (hi - lo, g.n_steps, p.d))
        _euler_paths(x0, W, const, p.A, p.b0, p.B, pos, root0, fixed, z, g.dt, idx, out[lo:hi])
    return PathEnsemble(g, n_paths, out, int(seed), "volterra-euler", idx)


def _check_paths(n_paths):
    n_paths = int(n_paths)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    return n_paths


def _double_integral(k, x):
    """int_0^x (x - s) K(s) ds for a scalar kernel."""
    x = np.asarray(x, dtype=float)
    z = np.zeros_like(x)
    return sum(x * kn.atom_integral(a, z, x) - kn.atom_integral(kn.atom_times_t(a), z, x) for a in kn.atoms(k))


def ivi_weights(k, g: TimeGrid) -> np.ndarray:
    """w_l = (1/dt) int over cell i of int over cell i-l of K(t - s) ds dt.

    This is how a unit increment spread uniformly over a cell feeds the
    integrated kernel l cells later; w_0 covers s < t inside one cell.
    """
    c = _double_integral(k, g.nodes)
    w = np.empty(g.n_steps)
    w[0] = c[1]
    w[1:] = c[2:] - 2.0 * c[1:-1] + c[:-2]
    return w / g.dt


def simulate_heston(h: HestonParams, g: TimeGrid, n_paths: int, seed: int = 42,
                    store: str = "path", scheme: str = "ivi", threads=None) -> PathEnsemble:
    """Paths of (log S, V).

    scheme="ivi" (default) steps the integrated variance U and the martingale
    Z = int sqrt(V) dW: given the past, the cell increment of U is inverse
    Gaussian and dZ follows from the linear cell relation, so U never
    decreases and no truncation is needed. log S moves by -dU/2 + rho dZ +
    sqrt(1 - rho^2) sqrt(dU) N. V at the nodes is V0 + sum (m1/dt) dX with
    dX = kappa theta dt - kappa dU + sigma dZ.

    scheme="euler" runs the convolution Euler scheme with sqrt(V+) diffusion;
    it is biased for rough kernels because V spends many steps below zero.
    """
    if scheme == "euler":
        ens = simulate_volterra_euler(heston_kernel(h), heston_to_affine(h), [np.log(h.s0), h.v0], g, n_paths,
                                      seed, store, threads)
        return PathEnsemble(g, ens.n_paths, ens.data, ens.seed, "heston-euler", ens.stored)
    if scheme != "ivi":
        raise ValueError("scheme must be 'ivi' or 'euler'")
    n_paths = _check_paths(n_paths)
    configure_threads(threads)
    w = ivi_weights(h.kernel, g)
    W = kn.kernel_moments(h.kernel, g).m1 / g.dt
    idx = _store_index(g, store)
    out = np.empty((n_paths, idx.size, 2))
    x0 = np.array([np.log(h.s0), h.v0])
    for b, lo, hi in _blocks(n_paths):
        z = block_normals(seed, b, (hi - lo, g.n_steps, 3))
        zn = np.ascontiguousarray(z[..., :2])
        zu = special.ndtr(z[..., 2])
        _ivi_paths(x0, h.kappa, h.theta, h.sigma, h.rho, w, W, g.dt, zn, zu, idx, out[lo:hi])
    return PathEnsemble(g, n_paths, out, int(seed), "heston-ivi", idx)


# --------------------------------------------------- exact Gaussian case

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _eb_evaluator(k, B, g):
    """Callable x -> E_B(x) as (m, d, d): exact kernel atoms plus H = E_B - K interpolated linearly."""
    from .resolvents import _eb_correction
    ents = kn.entries(k)
    d = len(ents)
    hn = _eb_correction(k, np.asarray(B, dtype=float).reshape(d, d), g)
    nodes = g.nodes

    def ev(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (d, d))
        for r in range(d):
            for c in range(d):
                out[..., r, c] = np.interp(x, nodes, hn[:, r, c])
        for r, e in enumerate(ents):
            out[..., r, r] += sum(kn.atom_eval(a, x) for a in kn.atoms(e))
        return out

    return ev, hn


def _gl(lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    half = 0.5 * (hi - lo)
    return (0.5 * (hi + lo))[..., None] + half[..., None] * _GL_X, half[..., None] * _GL_W


def _lag_cell_products(k, B, A0, g, depth=40):
    """D[m, c] = int over cell c of E_B(t_m + r) A0 E_B(r)^T dr, shape (n, n, d, d).

    Cells away from r = 0 use Gauss-Legendre; cell 0 is split dyadically
    towards 0 and the innermost piece uses E_B ~ K with exact kernel integrals.
    """
    ents = kn.entries(k)
    d = len(ents)
    n, h = g.n_steps, g.dt
    ev, _ = _eb_evaluator(k, B, g)
    D = np.empty((n, n, d, d))
    lo, hi = g.nodes[:-1], g.nodes[1:]
    r, w = _gl(lo[1:], hi[1:])                                    # (n-1, q)
    Er = ev(r)                                                     # (n-1, q, d, d)
    right = np.einsum("ab,cqdb->cqad", A0, Er)                    # A0 E(r)^T
    for m in range(n):
        Em = ev(g.nodes[m] + r)
        D[m, 1:] = np.einsum("cq,cqij,cqjk->cik", w, Em, right)
    # cell 0: pieces [h 2^-(j+1), h 2^-j] plus the innermost [0, eps]
    edges = h * 2.0 ** -np.arange(depth + 1)
    pr, pw = _gl(edges[1:], edges[:-1])
    Ep = ev(pr)
    rightp = np.einsum("ab,cqdb->cqad", A0, Ep)
    eps = edges[-1]
    kint = np.array([sum(kn.atom_integral(a, 0.0, eps) for a in kn.atoms(e)) for e in ents])
    for m in range(n):
        Em = ev(g.nodes[m] + pr)
        acc = np.einsum("cq,cqij,cqjk->ik", pw, Em, rightp)
        if m == 0:
            kk = np.array([[kn.product_integral(ents[i], ents[j], 0.0, eps) for j in range(d)] for i in range(d)])
            acc = acc + A0 * kk
        else:
            Eh = ev(np.array([g.nodes[m]]))[0]
            acc = acc + Eh @ (A0 * kint[None, :])
        D[m, 0] = acc
    return D


def ou_covariance(k, p: AffineParams, g: TimeGrid) -> np.ndarray:
    """Cov(X_{t_i}, X_{t_j}) for i, j = 1..n as an (n d, n d) matrix.

    Cov(X_{t_i}, X_{t_j}) = int_0^{min} E_B(t_i - s) A0 E_B(t_j - s)^T ds,
    assembled from lag-cell products.
    """
    d, n = p.d, g.n_steps
    D = _lag_cell_products(k, p.B, p.A[0], g)
    cum = np.concatenate([np.zeros((n, 1, d, d)), np.cumsum(D, axis=1)], axis=1)   # (lag, j cells)
    C = np.empty((n, n, d, d))
    for i in range(1, n + 1):
        for j in range(1, i + 1):
            c = cum[i - j, j]
            C[i - 1, j - 1] = c
            C[j - 1, i - 1] = c.T
    out = C.transpose(0, 2, 1, 3).reshape(n * d, n * d)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite covariance entry")
    return 0.5 * (out + out.T)


def simulate_ou_exact(k, p: AffineParams, X0, g: TimeGrid, n_paths: int, seed: int = 42) -> PathEnsemble:
    """Joint Gaussian sampling of (X_{t_1}, ..., X_{t_n}) for the Volterra OU model.

    The covariance is repaired to psd by clipping negative eigenvalues; the
    largest clipped magnitude is reported in info["clip"].
    """
    from .transform import unconditional_mean
    if p.state_space is not StateSpace.REAL or np.any(p.A[1:]):
        raise ValueError("exact sampling needs whole-space parameters with A^i = 0 for i >= 1")
    errs = validate(p)
    if errs:
        raise ValueError("; ".join(errs))
    d, n = p.d, g.n_steps
    mean = unconditional_mean(k, p, X0, g).values                 # (n+1, d)
    cov = ou_covariance(k, p, g)
    w, v = np.linalg.eigh(cov)
    clip = float(max(0.0, -w.min()))
    F = v * np.sqrt(np.clip(w, 0.0, None))
    out = np.empty((int(n_paths), n + 1, d))
    out[:, 0] = mean[0]
    for b, lo, hi in _blocks(int(n_paths)):
        z = block_normals(seed, b, (hi - lo, n * d))
        out[lo:hi, 1:] = mean[1:][None] + (z @ F.T).reshape(hi - lo, n, d)
    return PathEnsemble(g, int(n_paths), out, int(seed), "ou-exact", np.arange(n + 1), {"clip": clip})


# ------------------------------------------------------------ functionals

def mc_functional(paths: PathEnsemble, inputs: TransformInputs):
    """Sample mean of exp(u X_T + (f * X)_T) and its standard error.

    (f * X)_T = int_0^T f(T - s) X_s ds by the trapezoid rule on the nodes.
    The standard error is sqrt(se_re^2 + se_im^2) of the complex mean.
    """
    g = paths.grid
    T = inputs.T
    if T > g.t_end * (1 + 1e-12):
        raise ValueError("T lies beyond the simulated grid")
    iT = g.index_of(T)
    u = np.asarray(inputs.u, dtype=complex)
    if u.ndim != 1:
        raise ValueError("mc_functional takes a single u")
    pos = np.searchsorted(paths.stored, iT)
    if pos >= paths.stored.size or paths.stored[pos] != iT:
        raise ValueError("T is not a stored node")
    expo = paths.data[:, pos] @ u
    if inputs.f is not None:
        if not paths.full:
            raise ValueError("a path functional needs full path storage")
        sub = TimeGrid(T, iT)
        fn = inputs.f_nodes(sub)[0][::-1]                          # f(T - s) at s = t_0..t_iT
        vals = np.einsum("psa,sa->ps", paths.data[:, : iT + 1], fn)
        expo = expo + sub.dt * (vals.sum(axis=1) - 0.5 * (vals[:, 0] + vals[:, -1]))
    z = np.exp(expo)
    n = z.size
    est = z.mean()
    if n < 2:
        return complex(est), 0.0
    se = np.sqrt((z.real.var(ddof=1) + z.imag.var(ddof=1)) / n)
    return complex(est), float(se)


def holder_diagnostic(paths: PathEnsemble, component: int = 0, max_lag_levels: int = 6) -> float:
    """Slope of log RMS increment against log lag over dyadic lags.

    Needs full path storage and at least two lag levels. Returns NaN when
    the increments vanish (constant paths).
    """
    if not paths.full:
        raise ValueError("needs full path storage")
    x = paths.data[:, :, component]
    n = x.shape[1] - 1
    lags = [2 ** j for j in range(max_lag_levels) if 2 ** j <= n // 4]
    if len(lags) < 2:
        raise ValueError("grid too coarse for two lag levels")
    rms = np.array([np.sqrt(np.mean((x[:, l:] - x[:, :-l]) ** 2)) for l in lags])
    if np.any(rms <= 0):
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(lags) * paths.grid.dt), np.log(rms), 1)[0])
