"""Affine coefficient sets a(x) = A0 + sum_i x_i A^i, b(x) = b0 + B x and their validation.

Four state spaces are supported: the whole space (Gaussian / OU type), the
nonnegative orthant (square-root type), the two-dimensional Heston space
R x R_+ for (log S, V), and the three-dimensional lifted Heston space
R x R_+^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels as kn


class StateSpace(str, Enum):
    REAL = "real"
    ORTHANT = "orthant"
    HESTON = "heston"
    LIFTED_HESTON = "lifted_heston"


@dataclass(frozen=True, eq=False)
class AffineParams:
    """Coefficients of the affine maps.

    A : (d+1, d, d) stack A^0, ..., A^d of symmetric matrices.
    b0 : (d,) drift intercept.
    B : (d, d) drift matrix (column i multiplies x_i).
    state_space : StateSpace tag.
    sigma0 : optional (d, d) square root of A^0 for the whole-space case.
    """

    A: np.ndarray
    b0: np.ndarray
    B: np.ndarray
    state_space: StateSpace = StateSpace.REAL
    sigma0: np.ndarray = field(default=None)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b0 = np.atleast_1d(np.asarray(self.b0, dtype=float))
        d = b0.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(d, d)
        if A.shape != (d + 1, d, d):
            raise ValueError(f"A must have shape {(d + 1, d, d)}, got {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "state_space", StateSpace(self.state_space))
        if self.sigma0 is not None:
            object.__setattr__(self, "sigma0", np.asarray(self.sigma0, dtype=float).reshape(d, d))
        for arr in (A, b0, B):
            arr.setflags(write=False)

    @property
    def d(self) -> int:
        return self.b0.shape[0]


@dataclass(frozen=True)
class HestonParams:
    """Volterra Heston parameters; `kernel` is the scalar variance kernel."""

    s0: float
    v0: float
    kappa: float
    theta: float
    sigma: float
    rho: float
    kernel: kn.KernelSpec = field(default_factory=lambda: kn.Constant(1.0))

    def __post_init__(self):
        errs = heston_violations(self)
        if errs:
            raise ValueError("; ".join(errs))


def heston_violations(h) -> list:
    out = []
    if not (np.isfinite(h.s0) and h.s0 > 0):
        out.append("s0 must be positive")
    for name in ("v0", "kappa", "theta", "sigma"):
        v = getattr(h, name)
        if not (np.isfinite(v) and v >= 0):
            out.append(f"{name} must be nonnegative")
    if not (np.isfinite(h.rho) and -1.0 <= h.rho <= 1.0):
        out.append("rho must lie in [-1, 1]")
    if not kn.is_scalar(h.kernel):
        out.append("kernel must be a scalar kernel")
    return out


def _sym(a, tol=1e-12):
    return np.allclose(a, a.T, atol=tol, rtol=0)


def _psd(a, tol=1e-12):
    return np.linalg.eigvalsh(0.5 * (a + a.T)).min() >= -tol * max(1.0, np.abs(a).max())


def validate(p: AffineParams) -> list:
    """All violated state-space conditions; an empty list means the parameters are admissible."""
    out = []
    d = p.d
    if not (np.all(np.isfinite(p.A)) and np.all(np.isfinite(p.b0)) and np.all(np.isfinite(p.B))):
        out.append("coefficients must be finite")
        return out
    for i in range(d + 1):
        if not _sym(p.A[i]):
            out.append(f"A^{i} must be symmetric")
    ss = p.state_space
    off = ~np.eye(d, dtype=bool)
    if ss is StateSpace.REAL:
        if any(np.any(p.A[i] != 0) for i in range(1, d + 1)):
            out.append("a(x) must be psd on E: A^i must vanish for i >= 1 on the whole space")
        if not _psd(p.A[0]):
            out.append("a(x) must be psd on E: A^0 is not positive semidefinite")
        if p.sigma0 is not None and not np.allclose(p.sigma0 @ p.sigma0.T, p.A[0], atol=1e-10):
            out.append("sigma0 @ sigma0.T must equal A^0")
    elif ss is StateSpace.ORTHANT:
        if np.any(p.A[0] != 0):
            out.append("A^0 must vanish on the orthant")
        for i in range(d):
            Ai = p.A[i + 1]
            mask = np.ones((d, d), dtype=bool)
            mask[i, i] = False
            if np.any(Ai[mask] != 0):
                out.append(f"A^{i + 1} must be zero except its ({i + 1},{i + 1}) entry")
            if not Ai[i, i] > 0:
                out.append(f"A^{i + 1}[{i + 1},{i + 1}] must be positive")
        if np.any(p.b0 < 0):
            out.append("b0 must be nonnegative")
        if np.any(p.B[off] < 0):
            out.append("off-diagonal B negative")
    elif ss is StateSpace.HESTON:
        if d != 2:
            out.append("Heston state space needs d = 2")
            return out
        a2 = p.A[2]
        sig2 = a2[1, 1]
        if np.any(p.A[0] != 0) or np.any(p.A[1] != 0):
            out.append("A^0 and A^1 must vanish for Heston")
        if a2[0, 0] != 1.0 or sig2 < 0:
            out.append("A^2 must be [[1, rho sigma], [rho sigma, sigma^2]]")
        elif a2[0, 1] ** 2 > sig2 * (1 + 1e-12):
            out.append("A^2 off-diagonal exceeds sigma (|rho| > 1)")
        kappa = -p.B[1, 1]
        if p.b0[0] != 0 or p.b0[1] < 0:
            out.append("b0 must be (0, kappa theta) with kappa theta >= 0")
        if p.B[0, 0] != 0 or p.B[1, 0] != 0 or p.B[0, 1] != -0.5 or kappa < 0:
            out.append("B must be [[0, -1/2], [0, -kappa]] with kappa >= 0")
    elif ss is StateSpace.LIFTED_HESTON:
        if d != 3:
            out.append("lifted Heston state space needs d = 3")
            return out
        if np.any(p.A[0] != 0) or np.any(p.A[1] != 0):
            out.append("A^0 and A^1 must vanish for lifted Heston")
        a2 = p.A[2].copy()
        if a2[1, 1] < 0:
            out.append("A^2[2,2] must be nonnegative")
        a2[1, 1] = 0
        if np.any(a2 != 0):
            out.append("A^2 must be diag(0, sigma^2, 0)")
        if not np.array_equal(p.A[3], np.diag([1.0, 0.0, 0.0])):
            out.append("A^3 must be diag(1, 0, 0)")
        exp_b = np.array([[0, 0, -0.5], [0, p.B[1, 1], 0], [0, 1, 0]])
        if not np.array_equal(p.B, exp_b) or p.B[1, 1] > 0:
            out.append("B must be [[0, 0, -1/2], [0, -kappa, 0], [0, 1, 0]] with kappa >= 0")
        if p.b0[0] != 0 or p.b0[2] != 0 or p.b0[1] < 0:
            out.append("b0 must be (0, kappa theta, 0) with kappa theta >= 0")
    return out


def heston_to_affine(h: HestonParams) -> AffineParams:
    """Coefficients of X = (log S, V)."""
    rs = h.rho * h.sigma
    A = np.zeros((3, 2, 2))
    A[2] = [[1.0, rs], [rs, h.sigma ** 2]]
    b0 = np.array([0.0, h.kappa * h.theta])
    B = np.array([[0.0, -0.5], [0.0, -h.kappa]])
    return AffineParams(A, b0, B, StateSpace.HESTON)


def heston_kernel(h: HestonParams) -> kn.DiagonalMatrix:
    """diag(1, K) acting on (log S, V)."""
    return kn.DiagonalMatrix((kn.Constant(1.0), h.kernel))


def lifted_heston_to_affine(kappa: float, theta: float, sigma: float) -> AffineParams:
    """Coefficients of X = (log S, V, V~) with V~ = V~0 + K~ * V and independent drivers."""
    for name, v in (("kappa", kappa), ("theta", theta), ("sigma", sigma)):
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be nonnegative")
    A = np.zeros((4, 3, 3))
    A[2] = np.diag([0.0, sigma ** 2, 0.0])
    A[3] = np.diag([1.0, 0.0, 0.0])
    b0 = np.array([0.0, kappa * theta, 0.0])
    B = np.array([[0.0, 0.0, -0.5], [0.0, -kappa, 0.0], [0.0, 1.0, 0.0]])
    return AffineParams(A, b0, B, StateSpace.LIFTED_HESTON)


def lifted_heston_kernel(k_tilde) -> kn.DiagonalMatrix:
    if not kn.is_scalar(k_tilde):
        raise ValueError("the lifted kernel must be scalar")
    return kn.DiagonalMatrix((kn.Constant(1.0), kn.Constant(1.0), k_tilde))


def evaluate_affine(p: AffineParams, x):
    """(a(x), b(x)) for a state vector x."""
    x = np.asarray(x, dtype=float).reshape(p.d)
    a = p.A[0] + np.tensordot(x, p.A[1:], axes=(0, 0))
    return a, p.b0 + p.B @ x


def quadratic_form(p: AffineParams, u):
    """A(u)_i = u A^i u^T with the plain (non-conjugating) transpose; u may be batched."""
    u = np.asarray(u)
    return np.einsum("...a,iab,...b->...i", u, p.A[1:], u)


def diffusion_factor(p: AffineParams) -> np.ndarray:
    """Fixed factor C such that sigma(x) sigma(x)^T = a(x) with the factorisations used for simulation.

    Whole space: sigma = sigma0 (or the Cholesky / eigen root of A^0).
    Orthant: sigma(x) = diag(sigma_i sqrt(x_i^+)); returns the sigma_i.
    Heston: sigma(x) = sqrt(v^+) C with C the Cholesky factor of A^2.
    """
    ss = p.state_space
    if ss is StateSpace.REAL:
        if p.sigma0 is not None:
            return p.sigma0
        w, v = np.linalg.eigh(p.A[0])
        return v * np.sqrt(np.clip(w, 0, None))
    if ss is StateSpace.ORTHANT:
        return np.sqrt(np.array([p.A[i + 1][i, i] for i in range(p.d)]))
    if ss is StateSpace.HESTON:
        s2 = p.A[2][1, 1]
        rho_sig = p.A[2][0, 1]
        return np.array([[1.0, 0.0], [rho_sig, np.sqrt(max(s2 - rho_sig ** 2, 0.0))]])
    raise NotImplementedError(f"no diffusion factor for state space {ss.value}")
