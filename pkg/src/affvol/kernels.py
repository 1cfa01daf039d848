"""Time grids, convolution kernel families and their exact cell integrals.

Every scalar kernel is a finite sum of gamma atoms

    c * exp(-lam t) * t**(alpha - 1) / Gamma(alpha),

so cell integrals, squared-kernel integrals, first moments and pairwise
convolutions all have closed forms through the regularized incomplete gamma
function and the confluent hypergeometric function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import integrate, special


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * dt on [0, t_end] with n_steps cells."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_end) and self.t_end > 0):
            raise ValueError("t_end must be a positive finite number")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t_end", float(self.t_end))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Index of the node closest to t; raises if t is off-grid by more than 1e-9 dt."""
        x = t / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-9 * max(1.0, abs(x)) or i < 0 or i > self.n_steps:
            raise ValueError(f"time {t} is not a node of the grid")
        return i


# ----------------------------------------------------------------- kernels

class KernelSpec:
    """Base class of kernel descriptions."""


def _check_c(c):
    if not (np.isfinite(c) and c > 0):
        raise ValueError("c must be positive")


def _check_alpha(alpha):
    if not (np.isfinite(alpha) and alpha > 0.5):
        raise ValueError("alpha must exceed 0.5")
    if alpha > 1:
        raise ValueError("alpha must not exceed 1")


def _check_lam(lam):
    if not (np.isfinite(lam) and lam >= 0):
        raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class Constant(KernelSpec):
    c: float = 1.0

    def __post_init__(self):
        _check_c(self.c)


@dataclass(frozen=True)
class Fractional(KernelSpec):
    """c * t**(alpha-1) / Gamma(alpha)."""

    c: float = 1.0
    alpha: float = 0.75

    def __post_init__(self):
        _check_c(self.c)
        _check_alpha(self.alpha)


@dataclass(frozen=True)
class Exponential(KernelSpec):
    """c * exp(-lam t)."""

    c: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        _check_c(self.c)
        _check_lam(self.lam)


@dataclass(frozen=True)
class GammaKernel(KernelSpec):
    """c * exp(-lam t) * t**(alpha-1) / Gamma(alpha)."""

    c: float = 1.0
    alpha: float = 0.75
    lam: float = 1.0

    def __post_init__(self):
        _check_c(self.c)
        _check_alpha(self.alpha)
        _check_lam(self.lam)


@dataclass(frozen=True)
class Sum(KernelSpec):
    parts: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("Sum needs at least one part")
        for p in self.parts:
            if not is_scalar(p):
                raise ValueError("Sum entries must be scalar kernels")


@dataclass(frozen=True)
class DiagonalMatrix(KernelSpec):
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("DiagonalMatrix needs at least one entry")
        for p in self.entries:
            if not is_scalar(p):
                raise ValueError("DiagonalMatrix entries must be scalar kernels")


def is_scalar(k) -> bool:
    return isinstance(k, (Constant, Fractional, Exponential, GammaKernel, Sum))


def entries(k) -> list:
    """Scalar diagonal entries of a kernel (a scalar kernel is its own single entry)."""
    if isinstance(k, DiagonalMatrix):
        return list(k.entries)
    if is_scalar(k):
        return [k]
    raise TypeError(f"not a kernel: {k!r}")


# ------------------------------------------------------------ gamma atoms

class Atom(NamedTuple):
    """c * exp(-lam t) * t**(alpha-1) / Gamma(alpha); alpha > 0, c may be any sign."""

    c: float
    alpha: float
    lam: float


def atoms(k) -> list:
    if isinstance(k, Constant):
        return [Atom(k.c, 1.0, 0.0)]
    if isinstance(k, Fractional):
        return [Atom(k.c, k.alpha, 0.0)]
    if isinstance(k, Exponential):
        return [Atom(k.c, 1.0, k.lam)]
    if isinstance(k, GammaKernel):
        return [Atom(k.c, k.alpha, k.lam)]
    if isinstance(k, Sum):
        return [a for p in k.parts for a in atoms(p)]
    raise TypeError("atoms are defined for scalar kernels only")


def atom_eval(a: Atom, t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return a.c * np.exp(-a.lam * t) * t ** (a.alpha - 1.0) * special.rgamma(a.alpha)


def _power_diff(alpha, lo, hi):
    # hi**alpha - lo**alpha without cancellation for thin cells
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = hi ** alpha
    pos = lo > 0
    if np.any(pos):
        lp = lo[pos] if lo.ndim else lo
        hp = hi[pos] if hi.ndim else hi
        v = lp ** alpha * np.expm1(alpha * np.log1p((hp - lp) / lp))
        if lo.ndim:
            out = out.copy()
            out[pos] = v
        else:
            out = v
    return out


def atom_integral(a: Atom, lo, hi):
    """Exact integral of the atom over [lo, hi] (elementwise, 0 <= lo <= hi)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if a.lam == 0.0:
        if a.alpha == 1.0:
            return a.c * (hi - lo)
        return a.c * _power_diff(a.alpha, lo, hi) * special.rgamma(a.alpha + 1.0)
    x0, x1 = a.lam * lo, a.lam * hi
    if np.max(x1, initial=0.0) <= 1.0:
        # series in lam: lam**(-alpha) overflows and the gamma difference cancels for small lam t
        tot, fact = 0.0, 1.0
        for j in range(30):
            tot = tot + fact * _power_diff(a.alpha + j, lo, hi) / (a.alpha + j)
            fact *= -a.lam / (j + 1)
        return a.c * tot * special.rgamma(a.alpha)
    upper = x0 > a.alpha
    d = np.where(upper,
                 special.gammaincc(a.alpha, x0) - special.gammaincc(a.alpha, x1),
                 special.gammainc(a.alpha, x1) - special.gammainc(a.alpha, x0))
    return a.c * a.lam ** (-a.alpha) * d


def atom_product(a: Atom, b: Atom) -> Atom:
    al = a.alpha + b.alpha - 1.0
    if al <= 0:
        raise ValueError("product of atoms is not locally integrable")
    c = a.c * b.c * math.exp(special.gammaln(al) - special.gammaln(a.alpha) - special.gammaln(b.alpha))
    return Atom(c, al, a.lam + b.lam)


def atom_times_t(a: Atom) -> Atom:
    return Atom(a.c * a.alpha, a.alpha + 1.0, a.lam)


def atom_convolution(a: Atom, b: Atom, t):
    """(a * b)(t) = int_0^t a(t-s) b(s) ds in closed form."""
    if a.lam < b.lam:
        a, b = b, a
    t = np.asarray(t, dtype=float)
    s = a.alpha + b.alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (a.c * b.c * np.exp(-a.lam * t) * t ** (s - 1.0) * special.rgamma(s)
             * special.hyp1f1(b.alpha, s, (a.lam - b.lam) * t))
    return np.where(t > 0, v, 0.0 if s > 1 else np.inf)


# ----------------------------------------------------------- evaluation

def is_singular(k) -> bool:
    """True if some entry blows up at t = 0."""
    return any(a.alpha < 1.0 for e in entries(k) for a in atoms(e))


def eval_kernel(k, t):
    """Pointwise value of a scalar kernel (sum of its atoms).

    Raises ValueError for t <= 0 when the kernel is singular at the origin,
    and for negative t otherwise.
    """
    if not is_scalar(k):
        raise TypeError("eval_kernel expects a scalar kernel")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or (is_singular(k) and np.any(t <= 0)):
        raise ValueError("kernel evaluated outside its domain (t must be > 0)")
    out = sum(atom_eval(a, t) for a in atoms(k))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelMoments:
    """Cell integrals of a scalar kernel on a grid.

    m1[j] = int_{t_j}^{t_{j+1}} K, m2[j] = int K**2, tm1[j] = int s K(s) ds.
    p[j] and q[j] split m1[j] into the weights of the right and left
    hat functions of the cell, used by product-trapezoid rules.
    """

    grid: TimeGrid
    m1: np.ndarray
    m2: np.ndarray
    tm1: np.ndarray
    kernel: object = field(default=None, compare=False)

    @property
    def p(self) -> np.ndarray:
        h = self.grid.dt
        t = self.grid.nodes[:-1].reshape((-1,) + (1,) * (self.m1.ndim - 1))
        return (self.tm1 - t * self.m1) / h

    @property
    def q(self) -> np.ndarray:
        return self.m1 - self.p


def _cells(g: TimeGrid):
    x = g.nodes
    return x[:-1], x[1:]


def kernel_moments(k, g: TimeGrid) -> KernelMoments:
    """Exact cell integrals m1, m2 and first moments of a kernel.

    Scalar kernels give arrays of shape (n,); a DiagonalMatrix gives
    diagonal stacks of shape (n, d, d).
    """
    if isinstance(k, DiagonalMatrix):
        parts = [kernel_moments(e, g) for e in k.entries]
        d, n = len(parts), g.n_steps
        out = []
        for name in ("m1", "m2", "tm1"):
            a = np.zeros((n, d, d))
            for i, m in enumerate(parts):
                a[:, i, i] = getattr(m, name)
            out.append(a)
        return KernelMoments(g, *out, kernel=k)
    if not is_scalar(k):
        raise TypeError(f"not a kernel: {k!r}")
    lo, hi = _cells(g)
    at = atoms(k)
    if isinstance(k, Constant):
        n = g.n_steps
        m1 = np.full(n, k.c * g.dt)
        m2 = np.full(n, k.c * k.c * g.dt)
    else:
        m1 = sum(atom_integral(a, lo, hi) for a in at)
        m2 = sum(atom_integral(atom_product(a, b), lo, hi) for a in at for b in at)
    tm1 = sum(atom_integral(atom_times_t(a), lo, hi) for a in at)
    m1, m2, tm1 = (np.asarray(v, dtype=float) for v in (m1, m2, tm1))
    if not (np.all(np.isfinite(m1)) and np.all(np.isfinite(m2))):
        bad = int(np.flatnonzero(~(np.isfinite(m1) & np.isfinite(m2)))[0])
        raise FloatingPointError(f"non-finite kernel cell integral in cell {bad}")
    return KernelMoments(g, m1, m2, tm1, kernel=k)


def product_integral(k1, k2, lo, hi):
    """Exact integral of K1(s) K2(s) over [lo, hi] for scalar kernels."""
    return sum(atom_integral(atom_product(a, b), lo, hi) for a in atoms(k1) for b in atoms(k2))


def kernel_integral(k, t_end: float) -> float:
    """Adaptive-quadrature integral of a scalar kernel over [0, t_end] (reference path)."""
    f = lambda s: float(sum(atom_eval(a, s) for a in atoms(k)))
    alphas = [a.alpha for a in atoms(k) if a.alpha < 1.0]
    if not alphas:
        return integrate.quad(f, 0, t_end, epsabs=0, epsrel=1e-13, limit=200)[0]
    # split off the algebraic singularity of each singular atom
    total = 0.0
    for a in atoms(k):
        if a.alpha < 1.0:
            g = lambda s, a=a: a.c * math.exp(-a.lam * s) * special.rgamma(a.alpha)
            total += integrate.quad(g, 0, t_end, weight="alg", wvar=(a.alpha - 1.0, 0.0),
                                    epsabs=0, epsrel=1e-13, limit=200)[0]
        else:
            total += integrate.quad(lambda s, a=a: float(atom_eval(a, s)), 0, t_end,
                                    epsabs=0, epsrel=1e-13, limit=200)[0]
    return total


def holder_exponent_estimate(k) -> float:
    """Exponent gamma in (0, 2] of the standard L2-increment regularity condition."""
    if isinstance(k, (Constant, Exponential)):
        return 1.0
    if isinstance(k, (Fractional, GammaKernel)):
        return 1.0 if k.alpha == 1.0 else 2.0 * k.alpha - 1.0
    if isinstance(k, Sum):
        return min(holder_exponent_estimate(p) for p in k.parts)
    raise TypeError("holder_exponent_estimate expects a scalar kernel")


# ------------------------------------------------------- config grammar

_KINDS = ("constant", "fractional", "exponential", "gamma", "sum", "diagonal")


def kernel_from_dict(d: dict):
    """Build a kernel from its config mapping, e.g. {"kind": "fractional", "c": 1, "alpha": 0.6}."""
    if not isinstance(d, dict):
        raise ValueError("kernel must be a mapping")
    kind = str(d.get("kind", "")).lower()
    allowed = {
        "constant": {"kind", "c"},
        "fractional": {"kind", "c", "alpha"},
        "exponential": {"kind", "c", "lambda", "lam"},
        "gamma": {"kind", "c", "alpha", "lambda", "lam"},
        "sum": {"kind", "parts"},
        "diagonal": {"kind", "entries"},
    }
    if kind not in allowed:
        raise ValueError(f"unknown kernel kind {d.get('kind')!r}; expected one of {', '.join(_KINDS)}")
    extra = sorted(set(d) - allowed[kind])
    if extra:
        raise ValueError(f"unexpected kernel keys: {', '.join(extra)}")
    c = float(d.get("c", 1.0))
    lam = float(d.get("lambda", d.get("lam", 0.0)))
    if kind == "constant":
        return Constant(c)
    if kind == "fractional":
        return Fractional(c, float(d["alpha"]))
    if kind == "exponential":
        return Exponential(c, lam)
    if kind == "gamma":
        return GammaKernel(c, float(d["alpha"]), lam)
    if kind == "sum":
        return Sum(tuple(kernel_from_dict(p) for p in d["parts"]))
    return DiagonalMatrix(tuple(kernel_from_dict(p) for p in d["entries"]))


def kernel_to_dict(k) -> dict:
    if isinstance(k, Constant):
        return {"kind": "constant", "c": k.c}
    if isinstance(k, Fractional):
        return {"kind": "fractional", "c": k.c, "alpha": k.alpha}
    if isinstance(k, Exponential):
        return {"kind": "exponential", "c": k.c, "lambda": k.lam}
    if isinstance(k, GammaKernel):
        return {"kind": "gamma", "c": k.c, "alpha": k.alpha, "lambda": k.lam}
    if isinstance(k, Sum):
        return {"kind": "sum", "parts": [kernel_to_dict(p) for p in k.parts]}
    if isinstance(k, DiagonalMatrix):
        return {"kind": "diagonal", "entries": [kernel_to_dict(p) for p in k.entries]}
    raise TypeError(f"not a kernel: {k!r}")
