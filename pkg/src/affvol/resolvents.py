"""Resolvents of the second and first kind, the pair (R_B, E_B), and grid convolution.

Functions on the grid are stored as node values plus cell averages. Cell
averages carry the information that matters near an integrable singularity
at the origin: node 0 of a singular function holds its first cell average.

Second-kind resolvents of gamma-atom kernels are split as R = k - G with
G = k*k - k*G. The first convolution is exact, and G is continuous at 0, so
a product-trapezoid rule with exact kernel weights applies to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import kernels as kn
from .kernels import KernelMoments, TimeGrid


@dataclass(frozen=True)
class SampledFunction:
    """Grid function: values at nodes (n+1, ...) and cell averages (n, ...).

    `exact`, when given, is a gamma-atom component already included in the
    values; convolutions against another atom component use it in closed form.
    """

    grid: TimeGrid
    values: np.ndarray
    cells: np.ndarray = None
    exact: "AtomTable" = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape[0] != self.grid.n_steps + 1:
            raise ValueError("values must have n_steps + 1 rows")
        if not np.all(np.isfinite(v)):
            raise ValueError("sampled values must be finite")
        object.__setattr__(self, "values", v)
        c = self.cells
        if c is None:
            c = 0.5 * (v[1:] + v[:-1])
        c = np.asarray(c)
        if c.shape != (self.grid.n_steps,) + v.shape[1:]:
            raise ValueError("cells must have shape (n_steps, ...) matching values")
        object.__setattr__(self, "cells", c)

    @property
    def shape(self):
        return self.values.shape[1:]


@dataclass(frozen=True)
class MeasureRepr:
    """Measure on [0, t_end]: an atom at 0 plus a density constant on each cell.

    masses[j] is the mass of cell j; density = masses / dt. `density_atoms`
    optionally names a gamma-atom part of the density included in masses.
    """

    grid: TimeGrid
    atom0: np.ndarray
    masses: np.ndarray
    density_atoms: "AtomTable" = None

    def __post_init__(self):
        object.__setattr__(self, "atom0", np.asarray(self.atom0, dtype=float))
        m = np.asarray(self.masses, dtype=float)
        if m.shape != (self.grid.n_steps,) + self.atom0.shape:
            raise ValueError("masses must have shape (n_steps,) + atom0.shape")
        object.__setattr__(self, "masses", m)

    @property
    def density(self) -> np.ndarray:
        return self.masses / self.grid.dt

    def total_variation(self) -> float:
        return float(np.abs(self.atom0).sum() + np.abs(self.masses).sum())


class AtomTable:
    """Matrix (or scalar) function whose entries are sums of gamma atoms."""

    def __init__(self, table, scalar=False):
        self.table = tuple(tuple(tuple(c) for c in row) for row in table)
        self.scalar = scalar
        self.d = len(self.table)

    @classmethod
    def from_kernel(cls, k, right=None):
        ents = kn.entries(k)
        d = len(ents)
        M = np.eye(d) if right is None else np.asarray(right, dtype=float).reshape(d, d)
        tab = [[[kn.Atom(a.c * M[i, l], a.alpha, a.lam) for a in kn.atoms(ents[i])] if M[i, l] != 0 else []
                for l in range(d)] for i in range(d)]
        return cls(tab, scalar=kn.is_scalar(k) and right is None)

    @classmethod
    def from_atoms(cls, atoms_list):
        return cls([[list(atoms_list)]], scalar=True)

    def _shape(self, arr):
        return arr[..., 0, 0] if self.scalar else arr

    def _full(self, fn, n_rows):
        out = np.zeros((n_rows, self.d, self.d))
        for i, row in enumerate(self.table):
            for l, cell in enumerate(row):
                for a in cell:
                    out[:, i, l] += fn(a)
        return out

    def cell_integrals(self, g):
        lo, hi = g.nodes[:-1], g.nodes[1:]
        return self._full(lambda a: kn.atom_integral(a, lo, hi), g.n_steps)

    def hat_weights(self, g):
        """(m1, p, q) stacks of shape (n, d, d)."""
        lo, hi = g.nodes[:-1], g.nodes[1:]
        m1 = self.cell_integrals(g)
        tm1 = self._full(lambda a: kn.atom_integral(kn.atom_times_t(a), lo, hi), g.n_steps)
        p = (tm1 - lo[:, None, None] * m1) / g.dt
        return m1, p, m1 - p

    def node_values(self, g, m1=None):
        """Values at t_i for i >= 1; node 0 holds the first cell average."""
        t = g.nodes[1:]
        out = np.zeros((g.n_steps + 1, self.d, self.d))
        out[1:] = self._full(lambda a: kn.atom_eval(a, t), g.n_steps)
        if m1 is None:
            m1 = self.cell_integrals(g)
        out[0] = m1[0] / g.dt
        return out

    def conv(self, other, t):
        """(self * other)(t), entries multiplied in matrix order."""
        out = np.zeros((t.size, self.d, other.d))
        for i in range(self.d):
            for l in range(other.d):
                for m in range(self.d):
                    for a in self.table[i][m]:
                        for b in other.table[m][l]:
                            out[:, i, l] += kn.atom_convolution(a, b, t)
        return out

    def sampled(self, g):
        m1 = self.cell_integrals(g)
        return SampledFunction(g, self._shape(self.node_values(g, m1)), self._shape(m1 / g.dt), exact=self)


# --------------------------------------------------------------- helpers

def _mul(a, b):
    """Product of two stacks sharing leading axis 0; trailing dims are (), (d,) or (d, d)."""
    sa, sb = a.ndim - 1, b.ndim - 1
    if sa == 0:
        return a.reshape(a.shape + (1,) * sb) * b
    if sb == 0:
        return a * b.reshape(b.shape + (1,) * sa)
    if sa == 1 and sb == 2:
        return np.einsum("ni,nij->nj", a, b)
    if sa == 2 and sb == 1:
        return np.einsum("nij,nj->ni", a, b)
    if sa == 2 and sb == 2:
        return np.matmul(a, b)
    raise ValueError("cannot convolve two vector-valued functions")


def _check_compat(a, b):
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"dimension mismatch in convolution: {a.shape} and {b.shape}")


def _toeplitz(w, x, left: bool):
    """out[i] = sum_{k < i} w[k] (x) x[i-1-k]; w acts on the left if `left`."""
    n = w.shape[0]
    vw, vx = w.shape[1:], x.shape[1:]
    if left:
        _check_compat(np.empty(vw), np.empty(vx))
    else:
        _check_compat(np.empty(vx), np.empty(vw))
    probe = _mul(np.zeros((1,) + vw), np.zeros((1,) + vx)) if left else \
        _mul(np.zeros((1,) + vx), np.zeros((1,) + vw))
    out = np.zeros((n + 1,) + probe.shape[1:], dtype=np.result_type(w, x))
    for k in range(n):
        wk = np.broadcast_to(w[k], (n - k,) + vw)
        out[k + 1:] += _mul(wk, x[:n - k]) if left else _mul(x[:n - k], wk)
    return out


def _measure_parts(x):
    if isinstance(x, KernelMoments):
        ex = AtomTable.from_kernel(x.kernel) if x.kernel is not None else None
        return x.m1, None, ex
    if isinstance(x, MeasureRepr):
        return x.masses, x.atom0, x.density_atoms
    raise TypeError("unsupported convolution factor")


def _exact_correction(ea, eb, g, shape):
    """Closed-form minus grid value of the atom-by-atom part of a convolution."""
    if ea is None or eb is None:
        return 0.0
    t = g.nodes[1:]
    ma = ea.cell_integrals(g)
    cb = eb.cell_integrals(g) / g.dt
    approx = _toeplitz(ma, cb, left=True)
    corr = np.zeros_like(approx)
    corr[1:] = ea.conv(eb, t) - approx[1:]
    if ea.scalar and eb.scalar:
        corr = corr[..., 0, 0]
    return corr.reshape((g.n_steps + 1,) + shape) if corr.ndim > 1 else corr


def convolve(a, b) -> SampledFunction:
    """Grid convolution respecting the order of the factors.

    The value at t_i pairs the cell masses of the measure-like factor (exact
    kernel cell integrals for KernelMoments, cell masses for MeasureRepr,
    dt times cell averages for a SampledFunction) with the cell averages of
    the other factor; an atom at 0 multiplies node values. Gamma-atom
    components known on both sides are convolved in closed form.
    """
    if isinstance(a, SampledFunction) and isinstance(b, SampledFunction):
        _same_grid(a.grid, b.grid)
        g = a.grid
        out = g.dt * _toeplitz(a.cells, b.cells, left=True)
        return SampledFunction(g, out + _exact_correction(a.exact, b.exact, g, out.shape[1:]))
    if isinstance(b, SampledFunction):
        g = b.grid
        _same_grid(a.grid, g)
        masses, atom, ex = _measure_parts(a)
        out = _toeplitz(masses, b.cells, left=True)
        if atom is not None:
            out = out + _mul(np.broadcast_to(atom, b.values.shape[:1] + atom.shape), b.values)
        return SampledFunction(g, out + _exact_correction(ex, b.exact, g, out.shape[1:]))
    if isinstance(a, SampledFunction):
        g = a.grid
        _same_grid(b.grid, g)
        masses, atom, ex = _measure_parts(b)
        out = _toeplitz(masses, a.cells, left=False)
        if atom is not None:
            out = out + _mul(a.values, np.broadcast_to(atom, a.values.shape[:1] + atom.shape))
        return SampledFunction(g, out + _exact_correction(a.exact, ex, g, out.shape[1:]))
    raise TypeError("at least one factor must be a SampledFunction")


def _same_grid(g1, g2):
    if g1 != g2:
        raise ValueError("convolution factors live on different grids")


def _solve_linear(p, q, forcing, sign):
    """Solve X = F + sign * (g * X) on the grid by the product-trapezoid rule.

    p, q : (n, d, d) hat weights of the matrix kernel g (acting on the left).
    forcing : (n+1, d, e) node values of F, with X(0) = F(0).
    """
    n, d = p.shape[0], p.shape[1]
    x = np.zeros(forcing.shape, dtype=np.result_type(forcing, float))
    x[0] = forcing[0]
    try:
        lhs = np.linalg.inv(np.eye(d) - sign * q[0])
    except np.linalg.LinAlgError as err:
        raise FloatingPointError("singular diagonal block in the triangular solve") from err
    # node j in 1..i-1 sees lag i-j: weight p[i-1-j] + q[i-j]
    w_int = p[:-1] + q[1:]
    for i in range(1, n + 1):
        acc = p[i - 1] @ x[0]
        if i > 1:
            acc = acc + np.einsum("kab,kbc->ac", w_int[i - 2::-1], x[1:i])
        x[i] = lhs @ (forcing[i] + sign * acc)
        if not np.all(np.isfinite(x[i])):
            raise FloatingPointError(f"non-finite value in triangular solve at step {i}")
    return x


# ---------------------------------------------------- second-kind resolvents

def sample_kernel(k, g: TimeGrid) -> SampledFunction:
    """Kernel on the grid: exact node values and cell averages, node 0 = first cell average."""
    return AtomTable.from_kernel(k).sampled(g)


def resolvent_second_kind(k, g: TimeGrid, right=None) -> SampledFunction:
    """Resolvent R with K*R = R*K = K - R.

    Parameters
    ----------
    k : KernelSpec or SampledFunction
        Scalar or diagonal kernel. A SampledFunction is interpolated
        piecewise linearly between its nodes.
    g : TimeGrid
    right : array_like, optional
        Constant matrix M; the resolvent of diag(K) @ M is returned.
    """
    if isinstance(k, SampledFunction):
        return _second_kind_sampled(k)
    tab = AtomTable.from_kernel(k, right)
    m1, p, q = tab.hat_weights(g)
    gg = _solve_linear(p, q, tab.conv(tab, g.nodes), -1.0)
    vals = tab.node_values(g, m1) - gg
    vals[0] = m1[0] / g.dt - 0.5 * gg[1]
    cells = m1 / g.dt - 0.5 * (gg[1:] + gg[:-1])
    return SampledFunction(g, tab._shape(vals), tab._shape(cells), exact=tab)


def _second_kind_sampled(kf: SampledFunction) -> SampledFunction:
    g, h = kf.grid, kf.grid.dt
    v = kf.values
    scalar = v.ndim == 1
    if scalar:
        v = v[:, None, None]
    m1 = 0.5 * h * (v[1:] + v[:-1])
    p = h * (v[:-1] / 6.0 + v[1:] / 3.0)
    r = _solve_linear(p, m1 - p, v, -1.0)
    return SampledFunction(g, r[:, 0, 0] if scalar else r)


def _eb_correction(k, B, g):
    """Node values of H = E_B - K, which solves H = (KB)*K + (KB)*H and vanishes at 0."""
    d = B.shape[0]
    if not np.any(B):
        return np.zeros((g.n_steps + 1, d, d))
    kb = AtomTable.from_kernel(k, B)
    _, p, q = kb.hat_weights(g)
    return _solve_linear(p, q, kb.conv(AtomTable.from_kernel(k), g.nodes), 1.0)


def resolvent_pair_b(k, B, g: TimeGrid):
    """(R_B, E_B): R_B is the resolvent of -K B and E_B = K - R_B * K.

    E_B is computed as K + H with H = (K B) * E_B solved directly, which
    avoids convolving two singular functions. For B = 0, R_B = 0 and E_B = K
    exactly.
    """
    d = len(kn.entries(k))
    B = np.asarray(B, dtype=float).reshape(d, d)
    if not np.any(B):
        rb_shape = () if kn.is_scalar(k) else (d, d)
        rb = SampledFunction(g, np.zeros((g.n_steps + 1,) + rb_shape))
    else:
        rb = resolvent_second_kind(k, g, right=-B)
        if kn.is_scalar(k):
            rb = SampledFunction(g, rb.values[:, 0, 0], rb.cells[:, 0, 0],
                                 exact=AtomTable(rb.exact.table, scalar=True))
    return rb, _eb_from_parts(k, g, _eb_correction(k, B, g))


def _eb_from_parts(k, g, hn):
    ktab = AtomTable.from_kernel(k)
    m1 = ktab.cell_integrals(g)
    vals = ktab.node_values(g, m1) + hn
    vals[0] = m1[0] / g.dt + 0.5 * hn[1]
    cells = m1 / g.dt + 0.5 * (hn[1:] + hn[:-1])
    return SampledFunction(g, ktab._shape(vals), ktab._shape(cells), exact=ktab)


def eb_hat_weights(k, B, g: TimeGrid):
    """Hat weights (m1, p, q) of E_B, each (n, d, d), plus H = E_B - K at the nodes."""
    d = len(kn.entries(k))
    B = np.asarray(B, dtype=float).reshape(d, d)
    m1, p, _ = AtomTable.from_kernel(k).hat_weights(g)
    hn = _eb_correction(k, B, g)
    h = g.dt
    m1e = m1 + 0.5 * h * (hn[1:] + hn[:-1])
    pe = p + h * (hn[:-1] / 6.0 + hn[1:] / 3.0)
    return m1e, pe, m1e - pe, hn


# ---------------------------------------------------- first-kind resolvents

def _closed_first_kind(k, g):
    """(atom, masses, density atoms) for the single-family kernels."""
    lo, hi = g.nodes[:-1], g.nodes[1:]
    c = k.c
    alpha = getattr(k, "alpha", 1.0)
    lam = getattr(k, "lam", 0.0)
    if alpha == 1.0:
        if lam == 0.0:
            return 1.0 / c, np.zeros(g.n_steps), None
        dens = kn.Atom(lam / c, 1.0, 0.0)
        return 1.0 / c, kn.atom_integral(dens, lo, hi), [dens]
    dens = kn.Atom(1.0 / c, 1.0 - alpha, lam)
    mass = kn.atom_integral(dens, lo, hi)
    if lam > 0:
        # remaining part lam**alpha/c * P(1-alpha, lam t) of the density
        a = 1.0 - alpha

        def prim(x):
            return x * special.gammainc(a, lam * x) - a / lam * special.gammainc(a + 1.0, lam * x)

        mass = mass + lam ** alpha / c * (prim(hi) - prim(lo))
    return 0.0, mass, [dens]


def _numeric_first_kind(k, g):
    # atom from K(0+); cell masses by forward substitution of (K*L)(t_i) = 1
    at = kn.atoms(k)
    atom = 0.0 if kn.is_singular(k) else 1.0 / sum(a.c for a in at)
    kbar = kn.kernel_moments(k, g).m1 / g.dt
    knode = kn.eval_kernel(k, g.nodes[1:])
    mass = np.zeros(g.n_steps)
    for i in range(1, g.n_steps + 1):
        acc = atom * knode[i - 1]
        if i > 1:
            acc += np.dot(mass[: i - 1], kbar[i - 1:0:-1])
        mass[i - 1] = (1.0 - acc) / kbar[0]
    return atom, mass, None


def _check_first_kind_pre(k, g):
    m = kn.kernel_moments(k, g).m1
    if np.any(m < 0) or np.any(np.diff(m) > 1e-14 * np.abs(m).max()):
        raise ValueError("first-kind resolvent needs a nonnegative, non-increasing kernel")


def resolvent_first_kind(k, g: TimeGrid) -> MeasureRepr:
    """Measure L with K*L = L*K = 1, as an atom at 0 plus cell masses.

    Single-family kernels use their closed forms; Sum kernels are solved by
    forward substitution on the grid.
    """
    ents = kn.entries(k)
    res = []
    for e in ents:
        _check_first_kind_pre(e, g)
        res.append(_numeric_first_kind(e, g) if isinstance(e, kn.Sum) else _closed_first_kind(e, g))
    if kn.is_scalar(k):
        a, m, dens = res[0]
        return MeasureRepr(g, np.asarray(a), m, AtomTable.from_atoms(dens) if dens else None)
    d = len(ents)
    atom = np.zeros((d, d))
    mass = np.zeros((g.n_steps, d, d))
    tab = [[[] for _ in range(d)] for _ in range(d)]
    for i, (a, m, dens) in enumerate(res):
        atom[i, i] = a
        mass[:, i, i] = m
        tab[i][i] = dens or []
    has = any(r[2] for r in res)
    return MeasureRepr(g, atom, mass, AtomTable(tab) if has else None)


# --------------------------------------------------------------- residuals

def _pointwise(err):
    """Max-abs over components per node; node 0 is NaN (singular kernels have no value there)."""
    e = np.abs(err).reshape(err.shape[0], -1).max(axis=1)
    e[0] = np.nan
    return e


def second_kind_residuals(k, r: SampledFunction) -> np.ndarray:
    """|(K*R)(t_i) + R(t_i) - K(t_i)| at every node, using the grid convolution."""
    g = r.grid
    ks = sample_kernel(k, g)
    kr = convolve(kn.kernel_moments(k, g), r).values
    return _pointwise(kr + r.values - ks.values)


def second_kind_residual(k, r: SampledFunction) -> float:
    """max over t_i > 0 of |(K*R)(t_i) + R(t_i) - K(t_i)| with the grid convolution."""
    return float(np.nanmax(second_kind_residuals(k, r)))


def first_kind_residuals(k, L: MeasureRepr) -> np.ndarray:
    """|(K*L)(t_i) - 1| at every node, using the grid convolution."""
    out = convolve(L, sample_kernel(k, L.grid)).values
    target = np.eye(out.shape[-1]) if out.ndim == 3 else 1.0
    return _pointwise(out - target)


def first_kind_residual(k, L: MeasureRepr) -> float:
    """max over t_i > 0 of |(K*L)(t_i) - 1| with the grid convolution."""
    return float(np.nanmax(first_kind_residuals(k, L)))


def eb_residuals(k, rb: SampledFunction, eb: SampledFunction) -> np.ndarray:
    """|E_B(t_i) - K(t_i) + (R_B * K)(t_i)| at every node."""
    rk = convolve(rb, kn.kernel_moments(k, eb.grid)).values
    return _pointwise(eb.values - sample_kernel(k, eb.grid).values + rk)


def shifted_kernel_times_l(k, L: MeasureRepr, lag_steps: int) -> np.ndarray:
    """(Delta_h K * L)(t_i) for a scalar kernel, h = lag_steps * dt.

    Returns the values for t_i in [0, t_end - h].
    """
    g = L.grid
    m = int(lag_steps)
    ks = sample_kernel(k, g)
    n = g.n_steps
    out = np.empty(n - m + 1)
    for i in range(n - m + 1):
        # lag cell j of L meets K over cell m + i - 1 - j
        acc = L.atom0 * ks.values[i + m]
        if i > 0:
            acc = acc + np.dot(L.masses[:i], ks.cells[m:m + i][::-1])
        out[i] = acc
    return out
