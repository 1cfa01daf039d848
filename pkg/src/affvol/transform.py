"""Exponential-affine transforms, unconditional and conditional means.

E[exp(u X_T + (f * X)_T)] = exp(Y0) where Y0 is affine in X0 and is built
from the Riccati solution. The conditional mean E[X_T | F_t] is an affine
functional of the observed path through the adjustment Pi_h, which is
assembled from E_B and the first-kind resolvent L.
"""

from __future__ import annotations

import numpy as np

from . import kernels as kn
from .kernels import TimeGrid
from .model import AffineParams, StateSpace
from .resolvents import MeasureRepr, SampledFunction, resolvent_first_kind, resolvent_pair_b
from .riccati import BlowUpError, RiccatiSolution, TransformInputs, check_sign_conditions

UNVERIFIED = "unverified martingale hypothesis"


def _as_matrix(v, d):
    v = np.asarray(v)
    return v.reshape(v.shape[:1] + (d, d)) if v.ndim < 3 else v


def _require_global(sol: RiccatiSolution):
    if not sol.is_global:
        raise BlowUpError(f"Riccati solution blew up at t = {np.min(sol.t_max):.6g} before T = {sol.grid.t_end:.6g}")


def _last(a, batched):
    return a[:, -1] if batched else a[-1]


def y_zero(X0, sol: RiccatiSolution, p: AffineParams, inputs: TransformInputs = None):
    """Y0 = u X0 + int_0^T (f X0 + psi b(X0) + psi a(X0) psi^T / 2) ds.

    Uses the cumulative integrals carried by the solution, whose psi and
    psi psi^T parts are exact in the kernel. Returns a complex scalar, or one
    value per batch entry.
    """
    _require_global(sol)
    x = np.asarray(X0, dtype=float).reshape(p.d)
    batched = np.ndim(sol.phi) == 2
    a = p.A[0] + np.tensordot(x, p.A[1:], axes=(0, 0))
    b = p.b0 + p.B @ x
    u = sol.u
    ip, ipp, iff = (_last(v, batched) for v in (sol.int_psi, sol.int_psipsi, sol.int_f))
    y = (u + iff) @ x + ip @ b + 0.5 * np.einsum("...ab,ab->...", ipp, a)
    return y if batched else complex(y)


def transform_at_zero(X0, sol: RiccatiSolution, p: AffineParams, inputs: TransformInputs = None):
    """exp(Y0) = E[exp(u X_T + (f * X)_T)] under the martingale hypothesis."""
    return np.exp(y_zero(X0, sol, p, inputs))


def phi_chi_form(X0, sol: RiccatiSolution):
    """exp(phi(T) + chi(T) X0)."""
    _require_global(sol)
    x = np.asarray(X0, dtype=float)
    batched = np.ndim(sol.phi) == 2
    return np.exp(_last(sol.phi, batched) + _last(sol.chi, batched) @ x)


def mean_form(k, p: AffineParams, X0, sol: RiccatiSolution, inputs: TransformInputs):
    """Y0 from the conditional-mean representation at t = 0.

    Y0 = E[u X_T + (f * X)_T] + 1/2 int_0^T psi(T-s) a(E[X_s]) psi(T-s)^T ds,
    an independent route to the same value as y_zero. Unbatched inputs only.
    """
    _require_global(sol)
    if np.ndim(sol.phi) != 1:
        raise ValueError("mean_form takes an unbatched solution")
    g = sol.grid
    h = g.dt
    m = unconditional_mean(k, p, X0, g).values                      # (n+1, d)
    fn = inputs.f_nodes(g)[0]                                      # (n+1, d)
    fx = np.einsum("sa,sa->s", fn[::-1], m)
    y = sol.u @ m[-1] + h * (fx.sum() - 0.5 * (fx[0] + fx[-1]))
    # cell j of psi(T - s) is cell n-1-j of psi; a(E[X]) at the cell midpoint
    cpp = np.diff(sol.int_psipsi, axis=0)[::-1]                    # (n, d, d)
    mid = 0.5 * (m[1:] + m[:-1])
    a = p.A[0][None] + np.einsum("si,iab->sab", mid, p.A[1:])
    return complex(y + 0.5 * np.einsum("sab,sab->", cpp, a))


def hypothesis_status(p: AffineParams, inputs: TransformInputs, g: TimeGrid = None) -> str:
    """"verified" when a sign result guarantees that exp(Y) is a martingale.

    The whole-space (Gaussian) case is always verified since psi is then
    deterministic and linear. Otherwise the result is UNVERIFIED.
    """
    if p.state_space is StateSpace.REAL:
        return "verified"
    ok, _ = check_sign_conditions(p, inputs, g)
    return "verified" if ok else UNVERIFIED


# ---------------------------------------------------------------- means

def _mean_parts(k, B, g):
    """Cumulative int R_B, E_B at nodes, E_B cell averages and cumulative int E_B, all (., d, d)."""
    d = len(kn.entries(k))
    rb, eb = resolvent_pair_b(k, B, g)
    cum = lambda c: np.concatenate([np.zeros((1, d, d)), np.cumsum(c * g.dt, axis=0)])
    rbc = _as_matrix(rb.cells, d)
    ebn, ebc = _as_matrix(eb.values, d), _as_matrix(eb.cells, d)
    return cum(rbc), ebn, ebc, cum(ebc)


def unconditional_mean(k, p: AffineParams, X0, g: TimeGrid) -> SampledFunction:
    """E[X_t] = (id - int_0^t R_B) X0 + (int_0^t E_B) b0 on the grid."""
    x = np.asarray(X0, dtype=float).reshape(p.d)
    irb, _, _, ieb = _mean_parts(k, p.B, g)
    vals = x[None] - irb @ x + ieb @ p.b0
    return SampledFunction(g, vals)


def _lag_steps(h, g):
    m = h / g.dt
    mi = int(round(m))
    if mi < 0 or abs(m - mi) > 1e-9 * max(1.0, m):
        raise ValueError("the lag must be a nonnegative multiple of the grid step")
    return mi


def _shifted_conv_l(vals_node, vals_cell, L: MeasureRepr, m, n_out):
    """(Delta_h F * L)(t_i) for i = 0..n_out, F given by node values and cell averages.

    Matrix order F(t + h - s) L(ds); the density part pairs L's cell j with
    F's cell i + m - 1 - j.
    """
    shp = vals_node.shape[1:]
    atom = np.asarray(L.atom0)
    masses = L.masses
    if atom.ndim == 0:
        atom = atom * np.eye(shp[-1]) if shp else atom
        masses = masses[:, None, None] * np.eye(shp[-1]) if shp else masses
    out = np.empty((n_out + 1,) + shp, dtype=np.result_type(vals_node, float))
    for i in range(n_out + 1):
        acc = vals_node[i + m] @ atom if shp else vals_node[i + m] * atom
        if i > 0:
            cells = vals_cell[m:m + i][::-1]
            acc = acc + (np.einsum("j...a,jab->...b", cells, masses[:i]) if shp else np.dot(cells, masses[:i]))
        out[i] = acc
    return out


def adjustment_pi(k, source, h: float, g: TimeGrid):
    """Pi_h (matrix) or pi_h (row vector) on the nodes t_i of [0, T - h].

    source is AffineParams for Pi_h = Delta_h E_B * L - Delta_h(E_B * L),
    or a RiccatiSolution for pi_h = Delta_h psi * L - Delta_h(psi * L).
    g covers [0, T] and h must be a multiple of its step. The second term
    uses the identities E_B * L = id - int R_B and psi * L = chi.

    Returns (t, values); np.diff(values, axis=0) are the cell masses of the
    distributional derivative.
    """
    m = _lag_steps(h, g)
    n_out = g.n_steps - m
    if n_out < 0:
        raise ValueError("the lag exceeds the grid horizon")
    L = resolvent_first_kind(k, g)
    t = g.nodes[: n_out + 1]
    if isinstance(source, RiccatiSolution):
        _require_global(source)
        if np.ndim(source.phi) != 1:
            raise ValueError("adjustment_pi takes an unbatched solution")
        if source.grid != g:
            raise ValueError("the solution must live on g")
        if m == 0:
            return t, np.zeros((n_out + 1, source.psi.shape[-1]), dtype=complex)
        # L is diagonal, so the row-vector convolution acts componentwise
        cells = np.diff(source.int_psi, axis=0) / g.dt
        d = source.psi.shape[-1]
        Lm = L if np.ndim(L.atom0) == 2 else MeasureRepr(g, np.eye(d) * L.atom0, L.masses[:, None, None] * np.eye(d))
        first = _shifted_conv_l(source.psi[:, None, :], cells[:, None, :], Lm, m, n_out)[:, 0, :]
        return t, first - source.chi[m:]
    p = source
    d = p.d
    if m == 0:
        return t, np.zeros((n_out + 1, d, d))
    irb, ebn, ebc, _ = _mean_parts(k, p.B, g)
    Lm = L if np.ndim(L.atom0) == 2 else MeasureRepr(g, np.eye(1) * L.atom0, L.masses[:, None, None] * np.eye(1))
    first = _shifted_conv_l(ebn, ebc, Lm, m, n_out)
    second = np.eye(d)[None] - irb[m:]
    return t, first - second


def conditional_mean_from_path(k, p: AffineParams, path, g: TimeGrid, T: float):
    """E[X_T | F_t] from a path observed on g (t = g.t_end), with h = T - t.

    path has shape (n+1, d) or (n_paths, n+1, d). The result is
    (int_0^h E_B) b0 + (Delta_h E_B * L)(0) X_t - Pi_h(t) X0 + (dPi_h * X)_t,
    where dPi_h does not charge 0 and X is averaged over each cell.
    """
    x = np.asarray(path, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    n = g.n_steps
    if x.shape[1:] != (n + 1, p.d):
        raise ValueError(f"path must have shape ({n + 1}, {p.d})")
    t = g.t_end
    if T < t - 1e-12 * t:
        raise ValueError("T must not precede the observation time")
    m = _lag_steps(max(T - t, 0.0), g)
    if m == 0:
        out = x[:, -1].copy()
        return out[0] if single else out
    G = TimeGrid(g.dt * (n + m), n + m)
    irb, ebn, ebc, ieb = _mean_parts(k, p.B, G)
    _, pi = adjustment_pi(k, p, m * g.dt, G)                       # (n+1, d, d)
    L = resolvent_first_kind(k, G)
    atom = np.asarray(L.atom0) * (np.eye(p.d) if np.ndim(L.atom0) == 0 else 1.0)
    f0 = ebn[m] @ atom
    dpi = np.diff(pi, axis=0)                                      # cell j covers lag (t_j, t_{j+1}]
    xc = 0.5 * (x[:, 1:] + x[:, :-1])[:, ::-1]                     # X over [t - t_{j+1}, t - t_j]
    out = (ieb[m] @ p.b0)[None] + x[:, -1] @ f0.T - x[:, 0] @ pi[-1].T + np.einsum("jab,pjb->pa", dpi, xc)
    return out[0] if single else out
