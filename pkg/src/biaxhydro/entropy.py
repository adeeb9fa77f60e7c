"""Entropy functionals for the tensor pair.

Two choices are supported: the original entropy, defined implicitly through
the maximum entropy state on SO(3), and the second-order quasi-entropy, an
elementary log-determinant substitute.  Both expose values, gradients and
Hessians in the fixed 10-coordinate representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3_quad import QuadratureRule
from .tensor_core import (
    ConvergenceError,
    OutOfDomainError,
    QPair,
    SYM_BASIS,
    SymTraceless2,
    coords_from_matrix,
    matrix_from_coords,
)

__all__ = [
    "ConjugatePair",
    "EntropyKind",
    "xi2",
    "xi2_grad",
    "xi2_hess",
    "solve_conjugate",
    "f_orig",
    "entropy_grad",
    "orig_hessian",
    "moment_coords",
]

NEWTON_TOL = 1e-11
NEWTON_MAX_ITERS = 100
NEWTON_MAX_HALVINGS = 30


@dataclass(frozen=True)
class ConjugatePair:
    """Lagrange multipliers (B1, B2) of the maximum entropy state."""

    b1: SymTraceless2
    b2: SymTraceless2

    @classmethod
    def from_coords(cls, c: np.ndarray) -> "ConjugatePair":
        c = np.asarray(c, dtype=float)
        return cls(SymTraceless2(c[:5].copy()), SymTraceless2(c[5:].copy()))

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([self.b1.coords, self.b2.coords])

    def as_qpair(self) -> QPair:
        return QPair(self.b1, self.b2)


@dataclass(frozen=True)
class EntropyKind:
    """Tag selecting the entropy term: Original, or Quasi with weight nu."""

    tag: str
    nu: float = 1.0

    def __post_init__(self):
        if self.tag not in ("original", "quasi"):
            raise ValueError("tag must be 'original' or 'quasi'")
        if self.tag == "quasi" and self.nu <= 0:
            raise ValueError("nu must be positive for the quasi-entropy")

    @classmethod
    def original(cls) -> "EntropyKind":
        return cls("original")

    @classmethod
    def quasi(cls, nu: float = 5.0 / 9.0) -> "EntropyKind":
        return cls("quasi", nu)


# ---------------------------------------------------------------------------
# second-order quasi-entropy
# ---------------------------------------------------------------------------


def _domain_matrices_coords(qc: np.ndarray) -> np.ndarray:
    """The three positivity matrices, stacked; broadcasts over (..., 10)."""
    q1 = matrix_from_coords(qc[..., :5])
    q2 = matrix_from_coords(qc[..., 5:])
    eye3 = np.eye(3) / 3.0
    return np.stack([q1 + eye3, q2 + eye3, eye3 - q1 - q2], axis=-3)


def _cholesky_or_none(mats: np.ndarray):
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        return None


def xi2(q: QPair) -> float:
    """-ln det(Q1+I/3) - ln det(Q2+I/3) - ln det(I/3-Q1-Q2)."""
    return float(xi2_batch(q.coords[None])[0])


def xi2_batch(qc: np.ndarray) -> np.ndarray:
    mats = _domain_matrices_coords(qc)
    chol = _cholesky_or_none(mats)
    if chol is None:
        raise OutOfDomainError("tensor pair outside the log-determinant domain")
    diag = np.einsum("...ii->...i", chol)
    return -2.0 * np.sum(np.log(diag), axis=(-2, -1))


def xi2_grad(q: QPair) -> QPair:
    """Projected gradient of the second-order quasi-entropy."""
    return QPair.from_coords(xi2_grad_batch(q.coords[None])[0])


def xi2_grad_batch(qc: np.ndarray) -> np.ndarray:
    """Vectorized gradient; qc has shape (..., 10)."""
    mats = _domain_matrices_coords(qc)
    if _cholesky_or_none(mats) is None:
        raise OutOfDomainError("tensor pair outside the log-determinant domain")
    inv = np.linalg.inv(mats)
    g1 = -inv[..., 0, :, :] + inv[..., 2, :, :]
    g2 = -inv[..., 1, :, :] + inv[..., 2, :, :]
    return np.concatenate([coords_from_matrix(g1), coords_from_matrix(g2)], axis=-1)


def xi2_hess(q: QPair) -> np.ndarray:
    """10x10 symmetric positive definite Hessian of xi2 at q."""
    return xi2_hess_batch(q.coords[None])[0]


def xi2_hess_batch(qc: np.ndarray) -> np.ndarray:
    mats = _domain_matrices_coords(qc)
    if _cholesky_or_none(mats) is None:
        raise OutOfDomainError("tensor pair outside the log-determinant domain")
    inv = np.linalg.inv(mats)
    # blocks A_m[i,j] = tr(X_m^{-1} E_i X_m^{-1} E_j) for the 5 basis matrices
    pe = np.einsum("...mab,kbc->...mkac", inv, SYM_BASIS)
    blocks = np.einsum("...mkac,...mlca->...mkl", pe, pe)
    a1, a2, a3 = blocks[..., 0, :, :], blocks[..., 1, :, :], blocks[..., 2, :, :]
    top = np.concatenate([a1 + a3, a3], axis=-1)
    bot = np.concatenate([a3, a2 + a3], axis=-1)
    return np.concatenate([top, bot], axis=-2)


# ---------------------------------------------------------------------------
# original entropy via the maximum entropy state
# ---------------------------------------------------------------------------


def moment_coords(bcoords: np.ndarray, rule: QuadratureRule) -> np.ndarray:
    """Coordinates of (⟨m1^2-I/3⟩, ⟨m2^2-I/3⟩) under the density exp(B.m^2)."""
    w, _ = rule.boltzmann_weights(bcoords)
    return rule.coords2.T @ w


def _moments_and_cov(bcoords: np.ndarray, rule: QuadratureRule):
    w, lnz = rule.boltzmann_weights(bcoords)
    feats = rule.coords2
    mean = feats.T @ w
    cov = feats.T @ (feats * w[:, None]) - np.outer(mean, mean)
    return mean, cov, lnz


def solve_conjugate(q: QPair | np.ndarray, rule: QuadratureRule) -> ConjugatePair:
    """Invert the moment map: find B with moments(B) = Q.

    Damped Newton from B = 0; the Jacobian is the (positive definite) moment
    covariance.  Falls back to continuation in t*Q when the direct solve
    stalls; persistent failure signals a target outside (or too close to the
    boundary of) the admissible domain.
    """
    target = q.coords if isinstance(q, QPair) else np.asarray(q, dtype=float)
    b = _newton_conjugate(target, np.zeros(10), rule)
    if b is None:
        b = np.zeros(10)
        for t in (0.25, 0.5, 0.75, 1.0):
            b = _newton_conjugate(t * target, b, rule)
            if b is None:
                raise ConvergenceError(
                    "conjugate solve failed; target out of domain or near its boundary"
                )
    return ConjugatePair.from_coords(b)


def _newton_conjugate(target: np.ndarray, b0: np.ndarray, rule: QuadratureRule):
    b = b0.copy()
    mean, cov, _ = _moments_and_cov(b, rule)
    res = target - mean
    rnorm = np.linalg.norm(res)
    for _ in range(NEWTON_MAX_ITERS):
        if rnorm < NEWTON_TOL:
            return b
        try:
            step = np.linalg.solve(cov, res)
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        for _ in range(NEWTON_MAX_HALVINGS):
            b_new = b + alpha * step
            mean_new, cov_new, _ = _moments_and_cov(b_new, rule)
            rnorm_new = np.linalg.norm(target - mean_new)
            if rnorm_new < rnorm or rnorm_new < NEWTON_TOL:
                break
            alpha *= 0.5
        else:
            return None
        b, cov = b_new, cov_new
        res = target - mean_new
        rnorm = rnorm_new
    return b if rnorm < NEWTON_TOL else None


def f_orig(q: QPair, rule: QuadratureRule) -> float:
    """Original entropy B.Q - ln Z; zero at Q = 0 under normalized Haar."""
    b = solve_conjugate(q, rule)
    _, lnz = rule.boltzmann_weights(b.coords)
    return float(b.coords @ q.coords - lnz)


def orig_hessian(q: QPair, rule: QuadratureRule) -> np.ndarray:
    """Hessian dB/dQ of the original entropy: inverse of the moment covariance."""
    b = solve_conjugate(q, rule)
    _, cov, _ = _moments_and_cov(b.coords, rule)
    return np.linalg.inv(cov)


def entropy_grad(q: QPair, kind: EntropyKind, rule: QuadratureRule | None = None) -> QPair:
    """Derivative of the chosen entropy term with respect to Q."""
    if kind.tag == "original":
        if rule is None:
            raise ValueError("the original entropy requires a quadrature rule")
        return solve_conjugate(q, rule).as_qpair()
    return QPair.from_coords(kind.nu * xi2_grad_batch(q.coords[None])[0])


def entropy_value(q: QPair, kind: EntropyKind, rule: QuadratureRule | None = None) -> float:
    if kind.tag == "original":
        if rule is None:
            raise ValueError("the original entropy requires a quadrature rule")
        return f_orig(q, rule)
    return kind.nu * xi2(q)


def entropy_hess(q: QPair, kind: EntropyKind, rule: QuadratureRule | None = None) -> np.ndarray:
    if kind.tag == "original":
        if rule is None:
            raise ValueError("the original entropy requires a quadrature rule")
        return orig_hessian(q, rule)
    return kind.nu * xi2_hess(q)
