"""Riccati-Volterra solver for psi = u K + (f + psi B + A(psi)/2) * K.

The unknown is a complex row vector. Writing psi = u K(t) + w(t), the
remainder w obeys w = (F(psi)) * K and is advanced with product-trapezoid
rules built on the exact kernel hat weights. By default the equation at
each new node is solved exactly (it is quadratic in each component); the
alternative is a rectangle-rule predictor and one corrector evaluation.

When u does not vanish on a component with a singular kernel, psi behaves
like u K near 0 and F(psi) is not integrable by linear interpolation on the
first uniform cells. The first cells are then solved on a locally refined
grid (geometric towards 0) and handed over to the uniform stepper through
exact cell contributions. The same refinement is used for stiff starts.

The stepper also solves the equivalent form psi = u E_B + (f + A(psi)/2) * E_B.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from . import kernels as kn
from .kernels import TimeGrid
from .model import AffineParams, HestonParams, StateSpace, heston_kernel, heston_to_affine
from .resolvents import AtomTable, eb_hat_weights

BLOWUP_THRESHOLD = 1e8
GROWTH_THRESHOLD = 1e4
SIGN_TOL = 1e-9
START_CELLS = 16


@dataclass(frozen=True)
class TransformInputs:
    """u: complex row vector(s), shape (d,) or (nb, d); f: None, constant row, callable or node samples; T: horizon.

    A callable f maps an array of times (m,) to shape (m, d) or (m, nb, d).
    Node samples have shape (n+1, d) or (n+1, nb, d) and are interpolated
    linearly between nodes.
    """

    u: np.ndarray
    f: object = None
    T: float = 1.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=complex)
        if u.ndim not in (1, 2):
            raise ValueError("u must have shape (d,) or (nb, d)")
        object.__setattr__(self, "u", u)
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError("T must be positive")

    @property
    def batched(self) -> bool:
        return self.u.ndim == 2

    def f_nodes(self, g: TimeGrid) -> np.ndarray:
        """f at the nodes, shape (nb, n+1, d)."""
        u = self.u if self.batched else self.u[None]
        nb, d = u.shape
        n1 = g.n_steps + 1
        f = self.f
        if f is None:
            return np.zeros((nb, n1, d), dtype=complex)
        if callable(f):
            v = np.asarray(f(g.nodes), dtype=complex)
        else:
            v = np.asarray(f, dtype=complex)
            if v.shape in ((d,), (nb, d)):
                v = np.broadcast_to(v, (n1,) + v.shape)
        if v.shape == (n1, d):
            v = np.broadcast_to(v[:, None, :], (n1, nb, d))
        if v.shape != (n1, nb, d):
            raise ValueError(f"f samples have shape {v.shape}, expected {(n1, d)} or {(n1, nb, d)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("f must be finite")
        return np.ascontiguousarray(np.moveaxis(v, 1, 0))


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Grid solution psi, phi, chi = psi * L and termination status.

    Arrays carry a leading batch axis when the inputs were batched. Node 0
    of a component with a singular kernel holds its first cell average.
    status is "global" or "blowup"; t_max is the blow-up time estimate
    (inf when global).
    """

    grid: TimeGrid
    psi: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    status: object
    t_max: object
    u: np.ndarray
    int_f: np.ndarray = field(repr=False)
    int_psi: np.ndarray = field(repr=False)
    int_psipsi: np.ndarray = field(repr=False)

    @property
    def is_global(self):
        return np.all(np.asarray(self.status) == "global")


class BlowUpError(ArithmeticError):
    """Raised when a quantity needs a solution that exploded before T."""


def _small_root(qa, beta, gamma):
    """Root of qa y^2 - beta y + gamma = 0 that tends to gamma / beta as qa -> 0."""
    disc = np.sqrt(beta * beta - 4.0 * qa * gamma + 0j)
    den = np.where(np.abs(beta + disc) >= np.abs(beta - disc), beta + disc, beta - disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den != 0, 2.0 * gamma / den, np.inf)


def _solve_implicit(rhs, weight, G, y0, sweeps=60, tol=1e-14):
    """Solve y_i = rhs_i + weight_i * G_i(y) for all i, where G_i is quadratic in y_i.

    Gauss-Seidel over components; each scalar equation is solved exactly
    through its small root, with the quadratic recovered from three
    evaluations of G.
    """
    y = y0.copy()
    d = y.shape[1]
    for _ in range(sweeps):
        change = 0.0
        for i in range(d):
            probe = []
            for v in (0.0, 1.0, -1.0):
                z = y.copy()
                z[:, i] = v
                probe.append(G(z)[:, i])
            g0, gp, gm = probe
            qa = weight[i] * (0.5 * (gp + gm) - g0)
            c1 = 0.5 * (gp - gm)
            new = _small_root(qa, 1.0 - weight[i] * c1, rhs[:, i] + weight[i] * g0)
            change = max(change, float(np.nanmax(np.abs(new - y[:, i]) / (1.0 + np.abs(new)))) if new.size else 0.0)
            y[:, i] = new
        if d == 1 or change < tol:
            break
    return y


def _stepper(u, fn, m1, p, q, kdiag, forcing, Bp, A, kcell, g, scheme="implicit",
             blowup=BLOWUP_THRESHOLD, growth=GROWTH_THRESHOLD, real_problem=None, start=None):
    """Core time-stepping loop.

    u (nb, d); fn (nb, n+1, d) f at nodes; m1, p, q (n, d, d) hat weights of
    the convolution kernel (acting on the right of row vectors); kdiag
    (n+1, d) node values of the diagonal kernel defining the singular part
    u K; forcing (nb, n+1, d) continuous known part of w (zero at 0); Bp the
    linear coefficient inside F; A (d+1, d, d); kcell the first-cell data
    (kbar0, kk0, ks0). start, when given, is (m, psi at nodes 0..m, the
    contributions of [0, t_m] at every node) from a refined solve and
    replaces the first m steps. real_problem is an (nb,) mask of rows with
    real data, whose imaginary parts must stay at rounding level.

    scheme "pece": rectangle predictor and one product-trapezoid corrector.
    scheme "implicit": the product-trapezoid equation at the new node is
    solved exactly (diagonal kernels only).
    """
    nb, d = u.shape
    n = g.n_steps
    kbar0, kk0, ks0 = kcell
    Ai = A[1:]
    uk = u[:, None, :] * kdiag[None, :, :]
    psi = np.zeros((nb, n + 1, d), dtype=complex)
    w = np.zeros_like(psi)
    F = np.zeros_like(psi)
    fbar0 = 0.5 * (fn[:, 0] + fn[:, 1])
    wint = p[:-1] + q[1:]
    alive = np.ones(nb, dtype=bool)
    dead_at = np.full(nb, n + 1)
    implicit = scheme == "implicit"
    if implicit:
        if np.any(m1[0][~np.eye(d, dtype=bool)] != 0):
            raise ValueError("the implicit scheme needs a diagonal kernel")
        m0diag, q0diag = np.diag(m1[0]).copy(), np.diag(q[0]).copy()

    def fnode(ps, fv):
        return fv + ps @ Bp + 0.5 * np.einsum("iab,na,nb->ni", Ai, ps, ps)

    def fcell0(w1):
        mps = u * kbar0 + 0.5 * w1
        mpp = (u[:, :, None] * u[:, None, :] * kk0
               + u[:, :, None] * w1[:, None, :] * ks0[:, None]
               + w1[:, :, None] * u[:, None, :] * ks0[None, :]
               + w1[:, :, None] * w1[:, None, :] / 3.0)
        return fbar0 + mps @ Bp + 0.5 * np.einsum("iab,nab->ni", Ai, mpp)

    def hist(arrF, j0, j1, wts):
        # sum_j arrF[:, j] @ wts[j - j0] for j in [j0, j1)
        if j1 <= j0:
            return 0.0
        a = arrF[:, j0:j1, :].reshape(nb, -1)
        return a @ wts.reshape(-1, d)

    F0 = np.zeros((nb, d), dtype=complex)
    if start is None:
        m0, tail = 1, None
    else:
        m0, psi_start, tail = start[0], start[1], start[2].copy()
    prev = np.abs(uk[:, 1]).max(axis=1)
    for i in range(1, n + 1):
        if start is not None and i <= m0:
            ps = psi_start[:, i].copy()
        elif i == 1:
            if implicit:
                w1 = _solve_implicit(forcing[:, 1], m0diag, fcell0, forcing[:, 1])
            else:
                w1p = forcing[:, 1] + fcell0(forcing[:, 1]) @ m1[0]
                w1 = forcing[:, 1] + fcell0(w1p) @ m1[0]
            F0 = fcell0(w1)
            ps = uk[:, 1] + w1
        else:
            base = tail[:, i] if tail is not None else F0 @ m1[i - 1]
            corr = base + F[:, m0] @ p[i - 1 - m0] + hist(F, m0 + 1, i, wint[i - 2 - m0::-1])
            pred = uk[:, i] + forcing[:, i] + base + hist(F, m0, i, m1[i - 1 - m0::-1])
            if implicit:
                rhs = uk[:, i] + forcing[:, i] + corr
                ps = _solve_implicit(rhs, q0diag, lambda y: fnode(y, fn[:, i]), pred)
            else:
                fp = fnode(pred, fn[:, i])
                fp[~alive] = 0.0
                ps = uk[:, i] + forcing[:, i] + corr + fp @ q[0]
        mag = np.abs(ps).max(axis=1)
        bad = alive & (~np.isfinite(mag) | (mag > blowup) | (mag > growth * np.maximum(prev, 1.0)))
        if np.any(real_problem):
            bad |= alive & real_problem & (np.abs(ps.imag).max(axis=1) > 1e-8 * np.maximum(mag, 1.0))
        if np.any(bad):
            dead_at[bad] = i
            alive &= ~bad
            F0[~alive] = 0.0
            if tail is not None:
                tail[~alive] = 0.0
        ps[~alive] = 0.0
        wi = np.where(alive[:, None], ps - uk[:, i], 0.0)
        w[:, i] = wi
        psi[:, i] = ps
        F[:, i] = np.where(alive[:, None], fnode(ps, fn[:, i]), 0.0)
        prev = np.where(alive, mag, prev)
    return psi, w, dead_at


def _first_cell_data(ents, h):
    """Averages over [0, h] of K_a, K_a K_b and K_a s / h for scalar kernels ents."""
    d = len(ents)
    mom = [kn.kernel_moments(e, TimeGrid(h, 1)) for e in ents]
    kbar0 = np.array([m.m1[0] / h for m in mom])
    kk0 = np.array([[kn.product_integral(ents[a], ents[b], 0.0, h) / h for b in range(d)] for a in range(d)])
    ks0 = np.array([m.p[0] / h for m in mom])
    return kbar0, kk0, ks0


_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


def _cell_weights(e, lo, hi, width=None):
    """int_lo^hi K(t) dt and int_lo^hi K(t) (hi - t) dt for a scalar kernel, elementwise.

    Cells that are thin relative to their distance from the origin use
    Gauss-Legendre on the (analytic) kernel; the closed forms would lose
    all digits to cancellation there. Pass `width` when hi - lo is known
    more accurately than the difference of the endpoints.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dl = hi - lo if width is None else np.broadcast_to(np.asarray(width, dtype=float), np.broadcast(lo, hi).shape)
    i0 = np.zeros(np.broadcast(lo, hi).shape)
    i1 = np.zeros_like(i0)
    thin = np.broadcast_to(lo >= dl, i0.shape)
    lo_b, hi_b, dl_b = (np.broadcast_to(x, i0.shape) for x in (lo, hi, dl))
    if np.any(thin):
        lt, dt = lo_b[thin], dl_b[thin]
        x = 0.5 * (_GL_X + 1.0)
        t = lt[:, None] + dt[:, None] * x[None]
        kv = kn.eval_kernel(e, t) * (0.5 * dt[:, None]) * _GL_W[None]
        i0[thin] = kv.sum(axis=1)
        i1[thin] = (kv * (dt[:, None] * (1.0 - x[None]))).sum(axis=1)
    wide = ~thin
    if np.any(wide):
        lw, hw = lo_b[wide], hi_b[wide]
        v0 = sum(kn.atom_integral(at, lw, hw) for at in kn.atoms(e))
        vt = sum(kn.atom_integral(kn.atom_times_t(at), lw, hw) for at in kn.atoms(e))
        i0[wide] = v0
        i1[wide] = hw * v0 - vt
    return i0, i1


def _start_depth(u, ents, A, h, target=1e-2, min_ratio=1e-6, floor=1e-280):
    """Innermost sub-node s1 of the refined start, or None when no refinement is needed.

    Near t = 0 a singular component with u_a != 0 behaves like u_a K_a(t),
    and its square enters F with weight max_i |A^i_aa|. The resulting
    strength |u_a| |A^i_aa| c t^(2 alpha - 1), with c t^(alpha - 1) / Gamma(alpha)
    the leading atom of K_a, decays only slowly as t -> 0; s1 is chosen so
    that it is below `target`, and at least `min_ratio` times h.
    """
    s1 = None
    for a, e in enumerate(ents):
        ua = np.abs(u[:, a]).max()
        sing = [at for at in kn.atoms(e) if at.alpha < 1.0]
        if ua == 0.0 or not sing:
            continue
        al = min(at.alpha for at in sing)
        c = sum(abs(at.c) for at in sing if at.alpha == al) * special.rgamma(al)
        strength = ua * np.abs(A[1:, a, a]).max() * c
        cand = h * min_ratio
        if strength > 0.0:
            lg = (np.log(target) - np.log(strength)) / (2.0 * al - 1.0)
            cand = float(np.exp(np.clip(lg, np.log(floor), np.log(cand))))
        s1 = cand if s1 is None else min(s1, cand)
    return s1


def _start_groups(u, ents, A, h, refine):
    """(s1, batch indices) pairs; s1 is each entry's start depth rounded down to a power of two."""
    if not refine:
        return [(None, np.arange(u.shape[0]))]
    keys = []
    for b in range(u.shape[0]):
        s1 = _start_depth(u[b:b + 1], ents, A, h)
        keys.append(None if s1 is None else float(2.0 ** np.floor(np.log2(s1))))
    return [(key, np.array([b for b, kb in enumerate(keys) if kb == key]))
            for key in dict.fromkeys(keys)]


def _start_grid(g, s1, m, ratio, max_geo, pieces):
    """Sub-grid of [0, t_m]: geometric from s1 up to h, then cell j split in ceil(pieces / j).

    Returns the nodes and the sub-grid index of each uniform node 0..m.
    """
    h = g.dt
    mg = int(np.clip(np.ceil(np.log(h / s1) / np.log(ratio)), 2, max_geo))
    parts = [np.zeros(1), h * np.exp(np.linspace(np.log(s1 / h), 0.0, mg))]
    parts[1][-1] = g.nodes[1]
    idx = [0, mg]
    for j in range(1, m):
        r = int(np.ceil(pieces / j))
        seg = g.nodes[j] + h * np.arange(1, r + 1) / r
        seg[-1] = g.nodes[j + 1]
        parts.append(seg)
        idx.append(idx[-1] + r)
    return np.concatenate(parts), np.array(idx)


def _refined_start(u, fn, ents, A, Bp, g, s1, m, ratio=1.2, max_geo=2000, pieces=5.0, chunk=64):
    """Solve the equation on [0, t_m] over a locally refined grid.

    The kernel hat weights on the nonuniform cells are exact and the new
    node is solved implicitly. The innermost cell [0, s1] uses the
    cell-average treatment of the uniform scheme. Returns psi at the uniform
    nodes 0..m (node 0 unused), the contributions int_0^t_m K(t_i - r) F(r) dr
    at all nodes (used for i > m), and the integrals of psi and psi_a psi_b
    over the uniform cells 0..m-1.
    """
    nb, d = u.shape
    h = g.dt
    Ai = A[1:]
    s, idx = _start_grid(g, s1, m, ratio, max_geo, pieces)
    ms = s.size - 1
    kap = np.zeros((ms + 1, d))
    kap[1:] = np.stack([kn.eval_kernel(e, s[1:]) for e in ents], axis=1)
    # f at sub-nodes by linear interpolation between uniform nodes
    pos = s / h
    jl = np.minimum(np.floor(pos).astype(int), g.n_steps - 1)
    fr = (pos - jl)[None, :, None]
    fs = fn[:, jl] * (1.0 - fr) + fn[:, jl + 1] * fr
    kbar, kk, ks = _first_cell_data(ents, s[1])
    ds = np.diff(s)

    def fnode(ps, fv):
        return fv + ps @ Bp + 0.5 * np.einsum("iab,na,nb->ni", Ai, ps, ps)

    def fcell(w1):
        mps = u * kbar + 0.5 * w1
        mpp = (u[:, :, None] * u[:, None, :] * kk
               + u[:, :, None] * w1[:, None, :] * ks[:, None]
               + w1[:, :, None] * u[:, None, :] * ks[None, :]
               + w1[:, :, None] * w1[:, None, :] / 3.0)
        return 0.5 * (fs[:, 0] + fs[:, 1]) + mps @ Bp + 0.5 * np.einsum("iab,nab->ni", Ai, mpp)

    def weights(t, k0, k1):
        # hat weights at time t of sub-cells k0..k1-1 (k >= 1) and of the inner cell
        lo, hi = t[..., None] - s[k0 + 1:k1 + 1], t[..., None] - s[k0:k1]
        dk = ds[k0:k1]
        wl = np.empty(lo.shape + (d,))
        wr = np.empty_like(wl)
        win = np.empty(t.shape + (d,))
        for a, e in enumerate(ents):
            i0, i1 = _cell_weights(e, lo, hi, dk)
            wr[..., a] = i1 / dk
            wl[..., a] = i0 - i1 / dk
            win[..., a] = _cell_weights(e, t - s[1], t, s[1])[0]
        return wl, wr, win

    psi = np.zeros((nb, ms + 1, d), dtype=complex)
    F = np.zeros_like(psi)
    zero = np.zeros((nb, d), dtype=complex)
    w1 = _solve_implicit(zero, kbar * s[1], fcell, zero)
    fin = fcell(w1)
    psi[:, 1] = u * kap[1] + w1
    F[:, 1] = fnode(psi[:, 1], fs[:, 1])
    with np.errstate(all="ignore"):
        for n in range(2, ms + 1):
            wl, wr, win = weights(np.array(s[n]), 1, n)
            rhs = (u * kap[n] + fin * win + np.einsum("bkd,kd->bd", F[:, 1:n], wl)
                   + np.einsum("bkd,kd->bd", F[:, 2:n], wr[:-1]))
            pred = rhs + F[:, n - 1] * wr[-1]
            psi[:, n] = _solve_implicit(rhs, wr[-1], lambda y: fnode(y, fs[:, n]), pred)
            F[:, n] = fnode(psi[:, n], fs[:, n])
        # contributions of [0, t_m] at the later uniform nodes
        tail = np.zeros((nb, g.n_steps + 1, d), dtype=complex)
        for c0 in range(m + 1, g.n_steps + 1, chunk):
            rows = np.arange(c0, min(c0 + chunk, g.n_steps + 1))
            wl, wr, win = weights(g.nodes[rows], 1, ms)
            tail[:, rows] = (fin[:, None, :] * win[None] + np.einsum("bkd,rkd->brd", F[:, 1:ms], wl)
                             + np.einsum("bkd,rkd->brd", F[:, 2:], wr))
        # integrals over the uniform cells
        wv = psi - u[:, None, :] * kap[None]
        a0 = np.zeros((ms, d))
        a1 = np.zeros((ms, d))
        for a, e in enumerate(ents):
            i0, i1 = _cell_weights(e, s[1:-1], s[2:], ds[1:])
            a0[1:, a] = i0
            a1[1:, a] = i0 - i1 / ds[1:]
        w0, w1s = wv[:, :-1], wv[:, 1:]
        sub_psi = 0.5 * ds[None, :, None] * (w0 + w1s)
        kw = (a0 - a1)[None, :, :, None] * w0[:, :, None, :] + a1[None, :, :, None] * w1s[:, :, None, :]
        kw[:, 0] = (ks * s[1])[None, :, None] * wv[:, 1, None, :]
        ww = ds[None, :, None, None] / 6.0 * (2 * w0[..., :, None] * w0[..., None, :] + w0[..., :, None] * w1s[..., None, :]
                                               + w1s[..., :, None] * w0[..., None, :] + 2 * w1s[..., :, None] * w1s[..., None, :])
        cross = u[:, None, :, None] * kw
        sub_pp = cross + np.swapaxes(cross, -1, -2) + ww
        cell_psi = np.zeros((nb, m, d), dtype=complex)
        cell_pp = np.zeros((nb, m, d, d), dtype=complex)
        for j in range(m):
            sl = slice(idx[j], idx[j + 1])
            cell_psi[:, j] = sub_psi[:, sl].sum(axis=1)
            cell_pp[:, j] = sub_pp[:, sl].sum(axis=1)
        lo, hi = g.nodes[:m], g.nodes[1:m + 1]
        for a, e in enumerate(ents):
            cell_psi[:, :, a] += u[:, a, None] * _cell_weights(e, lo, hi)[0][None]
            for b in range(d):
                cell_pp[:, :, a, b] += u[:, a, None] * u[:, b, None] * kn.product_integral(e, ents[b], lo, hi)[None]
    return psi[:, idx], tail, cell_psi, cell_pp


def _kernel_diag_nodes(k, g):
    ents = kn.entries(k)
    out = np.zeros((g.n_steps + 1, len(ents)))
    for a, e in enumerate(ents):
        out[1:, a] = kn.eval_kernel(e, g.nodes[1:])
        out[0, a] = kn.eval_kernel(e, 0.0) if not kn.is_singular(e) else kn.kernel_moments(e, TimeGrid(g.dt, 1)).m1[0] / g.dt
    return out


def _integrals(u, w, k, g, fn, start_cells=None):
    """Cumulative integrals of f, psi and psi_a psi_b from the split psi = u K + w.

    start_cells optionally supplies the integrals of psi and psi_a psi_b over
    the first uniform cells.
    """
    ents = kn.entries(k)
    d = len(ents)
    h = g.dt
    lo, hi = g.nodes[:-1], g.nodes[1:]
    mom = [kn.kernel_moments(e, g) for e in ents]
    m1 = np.stack([m.m1 for m in mom], axis=1)          # (n, d)
    pk = np.stack([m.p for m in mom], axis=1)
    qk = m1 - pk
    m2 = np.empty((g.n_steps, d, d))
    for a in range(d):
        for b in range(a, d):
            m2[:, a, b] = m2[:, b, a] = kn.product_integral(ents[a], ents[b], lo, hi)
    w0, w1 = w[:, :-1], w[:, 1:]
    cell_psi = u[:, None, :] * m1[None] + 0.5 * h * (w0 + w1)
    uu = u[:, :, None] * u[:, None, :]
    cross = u[:, None, :, None] * (qk[None, :, :, None] * w0[:, :, None, :] + pk[None, :, :, None] * w1[:, :, None, :])
    cell_pp = (uu[:, None] * m2[None] + cross + np.swapaxes(cross, -1, -2)
               + h / 6.0 * (2 * w0[..., :, None] * w0[..., None, :] + w0[..., :, None] * w1[..., None, :]
                            + w1[..., :, None] * w0[..., None, :] + 2 * w1[..., :, None] * w1[..., None, :]))
    cell_f = 0.5 * h * (fn[:, :-1] + fn[:, 1:])
    if start_cells is not None:
        m = start_cells[0].shape[1]
        cell_psi[:, :m] = start_cells[0]
        cell_pp[:, :m] = start_cells[1]

    def cum(c):
        out = np.zeros((c.shape[0], c.shape[1] + 1) + c.shape[2:], dtype=complex)
        np.cumsum(c, axis=1, out=out[:, 1:])
        return out

    return cum(cell_f), cum(cell_psi), cum(cell_pp)


def _prepare_grid(inputs: TransformInputs, g: TimeGrid) -> TimeGrid:
    if abs(g.t_end - inputs.T) <= 1e-12 * inputs.T:
        return g
    return TimeGrid(inputs.T, g.index_of(inputs.T))


def solve_riccati(k, p: AffineParams, inputs: TransformInputs, g: TimeGrid, form: str = "direct",
                  scheme: str = "implicit", blowup_threshold: float = BLOWUP_THRESHOLD,
                  growth_threshold: float = GROWTH_THRESHOLD) -> RiccatiSolution:
    """Solve the Riccati-Volterra equation on [0, T].

    Parameters
    ----------
    k : scalar kernel (d = 1) or DiagonalMatrix of d scalar kernels.
    p : AffineParams
    inputs : TransformInputs
    g : TimeGrid covering [0, T] with T on a node.
    form : "direct" integrates against K with the B term inside the
        nonlinearity; "eb" integrates against E_B without it.
    scheme : "implicit" (default) solves the product-trapezoid equation at
        each new node exactly, which stays stable for stiff inputs (large
        |u| or vol-of-vol, kernels with alpha near 1/2); "pece" uses a
        rectangle predictor and a single corrector evaluation. The "eb"
        form always uses "pece" since E_B is not diagonal.

    Returns
    -------
    RiccatiSolution; phi by exact-in-kernel quadrature of psi b0 + psi A0 psi^T / 2,
    chi = u + int_0^t (f + psi B + A(psi)/2) ds, which equals psi * L.
    """
    d = len(kn.entries(k))
    if d != p.d:
        raise ValueError(f"kernel has {d} entries but the model has dimension {p.d}")
    if inputs.u.shape[-1] != d:
        raise ValueError("u has the wrong dimension")
    g = _prepare_grid(inputs, g)
    u = inputs.u if inputs.batched else inputs.u[None]
    nb = u.shape[0]
    fn = inputs.f_nodes(g)
    kdiag = _kernel_diag_nodes(k, g)
    ents = kn.entries(k)
    kcell = _first_cell_data(ents, g.dt)
    if form == "direct":
        m1, pw, qw = AtomTable.from_kernel(k).hat_weights(g)
        forcing = np.zeros((nb, g.n_steps + 1, d), dtype=complex)
        Bp = p.B
    elif form == "eb":
        m1, pw, qw, hn = eb_hat_weights(k, p.B, g)
        forcing = np.einsum("na,tab->ntb", u, hn)
        Bp = np.zeros((d, d))
    else:
        raise ValueError("form must be 'direct' or 'eb'")
    if scheme not in ("implicit", "pece"):
        raise ValueError("scheme must be 'implicit' or 'pece'")
    if form == "eb":
        scheme = "pece"
    real_problem = ~(np.any(u.imag, axis=1) | np.any(fn.imag, axis=(1, 2)))
    sing = np.array([kn.is_singular(e) for e in ents])
    n1 = g.n_steps + 1
    psi = np.empty((nb, n1, d), dtype=complex)
    int_f = np.empty((nb, n1, d), dtype=complex)
    int_psi = np.empty((nb, n1, d), dtype=complex)
    int_pp = np.empty((nb, n1, d, d), dtype=complex)
    dead_at = np.empty(nb, dtype=int)
    # the refined start depends on each entry alone, so batching never changes a result
    for s1, idx in _start_groups(u, ents, p.A, g.dt, form == "direct"):
        ug, fg = u[idx], fn[idx]
        start = cells = None
        if s1 is not None:
            m = min(START_CELLS, g.n_steps)
            psi_m, tail, cpsi, cpp = _refined_start(ug, fg, ents, p.A, Bp, g, s1, m)
            start, cells = (m, psi_m, tail), (cpsi, cpp)
        ps, w, dead_at[idx] = _stepper(ug, fg, m1, pw, qw, kdiag, forcing[idx], Bp, p.A, kcell, g, scheme,
                                       blowup_threshold, growth_threshold, real_problem[idx], start)
        avg0 = ug * kcell[0] + 0.5 * w[:, 1] if cells is None else cells[0][:, 0] / g.dt
        ps[:, 0] = np.where(sing, avg0, ug * kdiag[0])
        psi[idx] = ps
        int_f[idx], int_psi[idx], int_pp[idx] = _integrals(ug, w, k, g, fg, cells)
    chi = (u[:, None, :] + int_f + int_psi @ p.B
           + 0.5 * np.einsum("iab,ntab->nti", p.A[1:], int_pp))
    phi = int_psi @ p.b0 + 0.5 * np.einsum("ab,ntab->nt", p.A[0], int_pp)
    n = g.n_steps
    status = np.where(dead_at <= n, "blowup", "global")
    t_max = np.where(dead_at <= n, dead_at * g.dt, np.inf)
    for b in np.flatnonzero(dead_at <= n):
        j = dead_at[b]
        for arr in (psi, chi, phi, int_psi, int_pp):
            arr[b, j:] = np.nan
    if not inputs.batched:
        return RiccatiSolution(g, psi[0], phi[0], chi[0], str(status[0]), float(t_max[0]), inputs.u,
                               int_f[0], int_psi[0], int_pp[0])
    return RiccatiSolution(g, psi, phi, chi, status, t_max, inputs.u, int_f, int_psi, int_pp)


def solve_riccati_heston(h: HestonParams, inputs: TransformInputs, g: TimeGrid, **kw) -> RiccatiSolution:
    """Heston system for (log S, V): psi_1 = u_1 + int f_1 and the Volterra equation for psi_2."""
    return solve_riccati(heston_kernel(h), heston_to_affine(h), inputs, g, **kw)


def check_sign_conditions(p: AffineParams, inputs: TransformInputs, g: TimeGrid = None):
    """Whether the hypotheses guaranteeing Re psi <= 0 hold; returns (ok, reasons)."""
    if g is None:
        g = TimeGrid(inputs.T, 1000)
    g = _prepare_grid(inputs, g)
    u = inputs.u if inputs.batched else inputs.u[None]
    fn = inputs.f_nodes(g)
    reasons = []
    ss = p.state_space
    if ss is StateSpace.ORTHANT:
        if np.any(u.real > 0):
            reasons.append("Re u_i > 0 for some component")
        if np.any(fn.real > 0):
            reasons.append("Re f_i > 0 somewhere on the grid")
    elif ss is StateSpace.HESTON:
        re1 = u[:, 0].real[:, None] + np.concatenate(
            [np.zeros((u.shape[0], 1)), np.cumsum(0.5 * g.dt * (fn[:, 1:, 0] + fn[:, :-1, 0]).real, axis=1)], axis=1)
        if np.any(re1 < 0) or np.any(re1 > 1):
            reasons.append("Re psi_1 exits [0,1]")
        if np.any(u[:, 1].real > 0):
            reasons.append("Re u_2 > 0")
        if np.any(fn[:, :, 1].real > 0):
            reasons.append("Re f_2 > 0 somewhere on the grid")
    else:
        reasons.append(f"no sign result is available for the {ss.value} state space")
    return (not reasons), reasons


def max_real_part(sol: RiccatiSolution, components=None) -> float:
    """Largest Re psi_i over grid nodes (optionally over selected components)."""
    psi = sol.psi if components is None else sol.psi[..., components]
    return float(np.nanmax(psi.real))


def convergence_order_probe(solve: Callable[[int], np.ndarray], steps, truth=None):
    """Empirical convergence order from successive refinements.

    solve(n) must return the quantity of interest sampled at a set of times
    common to all grids. Errors are measured against `truth` when given,
    otherwise against the finest solve. Returns the least-squares slope of
    log error versus log dt, or "inconclusive" when errors do not decrease.
    """
    steps = list(steps)
    vals = [np.asarray(solve(n)) for n in steps]
    if truth is None:
        ref = vals[-1]
        vals, steps = vals[:-1], steps[:-1]
    else:
        ref = np.asarray(truth)
    errs = np.array([np.max(np.abs(v - ref)) for v in vals])
    if len(errs) < 2 or np.any(~np.isfinite(errs)) or np.any(errs <= 0) or np.any(np.diff(errs) >= 0):
        return "inconclusive"
    x = np.log(1.0 / np.asarray(steps, dtype=float))
    return float(np.polyfit(x, np.log(errs), 1)[0])
