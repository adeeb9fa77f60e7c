"""Bulk free energy: minimizers, Hessian spectrum, and kernel projections.

The bulk energy is an entropy term plus a quadratic coupling of the two
tensors.  This module finds its biaxial minimizers, decomposes the Hessian
at a stationary point into a three-dimensional rotation kernel (spanned by
analytic tangents of the rotation orbit) and a positive complement, and
provides the in/out projections used by the slow-manifold analysis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .entropy import EntropyKind, entropy_grad, entropy_hess, entropy_value
from .so3_quad import QuadratureRule
from .tensor_core import (
    ConvergenceError,
    Frame,
    OutOfDomainError,
    QPair,
    domain_membership,
)

__all__ = [
    "BulkCoefficients",
    "BiaxialForm",
    "HessianSpectrum",
    "bulk_energy",
    "bulk_gradient",
    "bulk_hessian",
    "find_minimizer",
    "hessian_spectrum",
    "kernel_tangents",
    "project_in",
    "project_out",
    "verify_assumption1",
]

# embedding of the reduced biaxial coordinates (s1, b1, s2, b2) into the
# 10 orthonormal coordinates of the tensor pair (identity frame)
_S_EMBED = np.zeros((10, 4))
_S_EMBED[0, 0] = np.sqrt(2.0 / 3.0)
_S_EMBED[1, 1] = np.sqrt(2.0)
_S_EMBED[5, 2] = np.sqrt(2.0 / 3.0)
_S_EMBED[6, 3] = np.sqrt(2.0)

GRAD_TOL_REDUCED = 1e-12
GRAD_TOL_FULL = 1e-10
STATIONARY_TOL = 1e-8


@dataclass(frozen=True)
class BulkCoefficients:
    """Quadratic coupling coefficients and the entropy choice."""

    c02: float
    c03: float
    c04: float
    kind: EntropyKind = field(default_factory=EntropyKind.quasi)

    @property
    def d0(self) -> np.ndarray:
        """The 2x2 coupling matrix acting blockwise on (Q1, Q2)."""
        return np.array([[self.c02, self.c04], [self.c04, self.c03]])

    @property
    def d0_coords(self) -> np.ndarray:
        """The coupling as a 10x10 matrix on pair coordinates."""
        return np.kron(self.d0, np.eye(5))

    def to_json(self) -> dict:
        return {
            "c02": self.c02,
            "c03": self.c03,
            "c04": self.c04,
            "entropy": self.kind.tag,
            "nu": self.kind.nu,
        }


@dataclass(frozen=True)
class BiaxialForm:
    """A commuting tensor pair diag(2s/3, -s/3+b, -s/3-b) in a shared frame."""

    s1: float
    b1: float
    s2: float
    b2: float
    frame: Frame = field(default_factory=Frame.identity)

    def __post_init__(self):
        if feasibility_margin(np.array([self.s1, self.b1, self.s2, self.b2])) <= 0:
            raise OutOfDomainError("biaxial scalars violate the eigenvalue range")

    @property
    def scalars(self) -> np.ndarray:
        return np.array([self.s1, self.b1, self.s2, self.b2])

    def eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues of (Q1, Q2) in the order (n1, n2, n3)."""
        s1, b1, s2, b2 = self.scalars
        l1 = np.array([2 * s1 / 3, -s1 / 3 + b1, -s1 / 3 - b1])
        l2 = np.array([2 * s2 / 3, -s2 / 3 + b2, -s2 / 3 - b2])
        return l1, l2

    def as_qpair(self) -> QPair:
        l1, l2 = self.eigenvalues()
        r = self.frame.mat
        m1 = (r * l1) @ r.T
        m2 = (r * l2) @ r.T
        return QPair.from_matrices(m1, m2)

    def to_json(self) -> dict:
        return {
            "s1": self.s1,
            "b1": self.b1,
            "s2": self.s2,
            "b2": self.b2,
            "frame": self.frame.to_json(),
        }


@dataclass(frozen=True)
class HessianSpectrum:
    """Eigen-decomposition of the bulk Hessian at a stationary point."""

    eigenvalues: np.ndarray            # all 10, ascending
    eigenvectors: tuple[QPair, ...]    # matching order, orthonormal
    kernel: tuple[QPair, ...]          # analytic rotation tangents (nonzero ones)
    kernel_basis: np.ndarray           # (10, k) orthonormal span of `kernel`
    positive_basis: tuple[QPair, ...]  # eigenvectors with eigenvalue > zero_tol
    positive_eigenvalues: np.ndarray
    xi_angle: float                    # angle between span(kernel) and numerical kernel
    zero_tol: float

    @property
    def kernel_dim(self) -> int:
        return int(np.sum(np.abs(self.eigenvalues) < self.zero_tol))

    @property
    def smallest_positive(self) -> float:
        pos = self.eigenvalues[self.eigenvalues >= self.zero_tol]
        return float(pos[0]) if pos.size else float("nan")


def feasibility_margin(sb: np.ndarray) -> float:
    """Smallest of the nine eigenvalue-range quantities; > 0 means admissible."""
    s1, b1, s2, b2 = sb
    s3, b3 = -s1 - s2, -b1 - b2
    vals = []
    for s, b in ((s1, b1), (s2, b2), (s3, b3)):
        vals += [2 * s / 3 + 1.0 / 3.0, 1.0 / 3.0 - s / 3 + b, 1.0 / 3.0 - s / 3 - b]
    return min(vals)


# ---------------------------------------------------------------------------
# energy, gradient, Hessian on the full 10-coordinate space
# ---------------------------------------------------------------------------


def bulk_energy(q: QPair, c: BulkCoefficients, rule: QuadratureRule | None = None) -> float:
    qc = q.coords
    return entropy_value(q, c.kind, rule) + 0.5 * float(qc @ c.d0_coords @ qc)


def bulk_gradient(q: QPair, c: BulkCoefficients, rule: QuadratureRule | None = None) -> QPair:
    g = entropy_grad(q, c.kind, rule).coords + c.d0_coords @ q.coords
    return QPair.from_coords(g)


def bulk_hessian(q: QPair, c: BulkCoefficients, rule: QuadratureRule | None = None) -> np.ndarray:
    return entropy_hess(q, c.kind, rule) + c.d0_coords


# ---------------------------------------------------------------------------
# minimizer search
# ---------------------------------------------------------------------------


def _reduced_fgh(c: BulkCoefficients, rule: QuadratureRule | None):
    """Energy/gradient/Hessian in the reduced (s1, b1, s2, b2) coordinates."""

    def value(sb):
        if feasibility_margin(sb) <= 1e-12:
            return np.inf
        try:
            return bulk_energy(QPair.from_coords(_S_EMBED @ sb), c, rule)
        except (OutOfDomainError, ConvergenceError):
            return np.inf

    def grad(sb):
        g = bulk_gradient(QPair.from_coords(_S_EMBED @ sb), c, rule)
        return _S_EMBED.T @ g.coords

    def hess(sb):
        h = bulk_hessian(QPair.from_coords(_S_EMBED @ sb), c, rule)
        return _S_EMBED.T @ h @ _S_EMBED

    return value, grad, hess


def _newton_reduced(sb0, value, grad, hess, max_iters=200):
    """Regularized Newton with backtracking; returns (sb, gradient_inf_norm)."""
    sb = np.asarray(sb0, dtype=float).copy()
    for _ in range(max_iters):
        g = grad(sb)
        if np.abs(g).max() < GRAD_TOL_REDUCED:
            return sb, np.abs(g).max()
        h = hess(sb)
        tau = max(0.0, 1e-6 - np.linalg.eigvalsh(h)[0])
        advanced = False
        for _ in range(40):
            try:
                step = np.linalg.solve(h + tau * np.eye(4), -g)
            except np.linalg.LinAlgError:
                tau = max(2 * tau, 1e-6)
                continue
            f0 = value(sb)
            alpha = 1.0
            for _ in range(40):
                cand = sb + alpha * step
                if value(cand) < f0 - 1e-14:
                    sb, advanced = cand, True
                    break
                alpha *= 0.5
            if advanced:
                break
            tau = max(4 * tau, 1e-6)  # shrink the implied trust region
        if not advanced:
            break
    return sb, np.abs(grad(sb)).max()


def _polish_full(q: QPair, c: BulkCoefficients, rule, max_iters=60) -> QPair:
    """Newton polish in all 10 coordinates (least-squares step: the Hessian
    may be singular along the rotation orbit at the solution)."""
    qc = q.coords.copy()
    for _ in range(max_iters):
        g = bulk_gradient(QPair.from_coords(qc), c, rule).coords
        if np.abs(g).max() < 0.1 * GRAD_TOL_FULL:
            break
        h = bulk_hessian(QPair.from_coords(qc), c, rule)
        step = np.linalg.lstsq(h, -g, rcond=1e-10)[0]
        if not domain_membership(QPair.from_coords(qc + step)):
            step *= 0.5
        qc = qc + step
    return QPair.from_coords(qc)


def _canonical_scalars(sb: np.ndarray) -> np.ndarray:
    """Pick the axis labeling with largest s1, then flip signs so b2 >= 0."""
    s1, b1, s2, b2 = sb
    l1 = np.array([2 * s1 / 3, -s1 / 3 + b1, -s1 / 3 - b1])
    l2 = np.array([2 * s2 / 3, -s2 / 3 + b2, -s2 / 3 - b2])
    best = None
    for p in itertools.permutations(range(3)):
        cs1 = 1.5 * l1[p[0]]
        cb1 = 0.5 * (l1[p[1]] - l1[p[2]])
        cs2 = 1.5 * l2[p[0]]
        cb2 = 0.5 * (l2[p[1]] - l2[p[2]])
        if cb2 < 0:  # swapping the two minor axes flips both b's together
            cb1, cb2 = -cb1, -cb2
        cand = np.array([cs1, cb1, cs2, cb2])
        if best is None or cand[0] > best[0] + 1e-12 or (
            abs(cand[0] - best[0]) <= 1e-12 and tuple(cand) > tuple(best)
        ):
            best = cand
    return best


def find_minimizer(
    c: BulkCoefficients,
    rule: QuadratureRule | None = None,
    starts: int = 12,
    seed: int = 0,
) -> BiaxialForm:
    """Lowest-energy stationary point of the bulk energy, in biaxial form.

    Stage one minimizes over the reduced commuting form with the identity
    frame (regularized Newton from random feasible starts plus a fixed
    deterministic start, pulled back into the admissible range).  Stage two
    polishes the winner in the full coordinate space and checks stationarity.
    """
    value, grad, hess = _reduced_fgh(c, rule)
    rng = np.random.default_rng(seed)

    det = np.array([0.5, 0.0, 0.5, 0.0])
    while feasibility_margin(det) <= 0.02:
        det *= 0.5
    inits = [det]
    for _ in range(starts):
        while True:
            cand = rng.uniform(-1.0, 1.0, 4)
            if feasibility_margin(cand) > 0.05:
                break
        inits.append(cand)

    results = []
    for sb0 in inits:
        try:
            sb, gmax = _newton_reduced(sb0, value, grad, hess)
        except (OutOfDomainError, ConvergenceError):
            continue
        f = value(sb)
        if np.isfinite(f) and gmax < 1e-8:
            results.append((f, tuple(sb)))
    if not results:
        raise ConvergenceError("no start converged to a stationary point")

    results.sort(key=lambda t: (t[0], t[1]))
    sb_best = np.array(results[0][1])

    q = _polish_full(QPair.from_coords(_S_EMBED @ sb_best), c, rule)
    if bulk_gradient(q, c, rule).norm() >= GRAD_TOL_FULL:
        raise ConvergenceError("full-space polish failed to reach stationarity")

    # recover the scalars of the polished point (it stays in the reduced slice)
    sb = _S_EMBED.T @ q.coords / np.array([2.0 / 3.0, 2.0, 2.0 / 3.0, 2.0])
    sb = _canonical_scalars(sb)
    s1, b1, s2, b2 = sb
    return BiaxialForm(s1, b1, s2, b2)


# ---------------------------------------------------------------------------
# Hessian spectrum, rotation tangents, projections
# ---------------------------------------------------------------------------


def kernel_tangents(q0: BiaxialForm) -> tuple[QPair, ...]:
    """Analytic tangents of the rotation orbit at a commuting biaxial pair.

    Rotating about the frame axis n_k moves the pair along
        xi_1 = 2 b   (n2 n3 + n3 n2),
        xi_2 = -(s+b)(n1 n3 + n3 n1),
        xi_3 =  (s-b)(n1 n2 + n2 n1),
    applied blockwise with (s_i, b_i).  Zero tangents (uniaxial or isotropic
    degeneracies) are dropped.
    """
    n1, n2, n3 = q0.frame.n1, q0.frame.n2, q0.frame.n3
    sym23 = np.outer(n2, n3) + np.outer(n3, n2)
    sym13 = np.outer(n1, n3) + np.outer(n3, n1)
    sym12 = np.outer(n1, n2) + np.outer(n2, n1)
    coeffs = [
        (2 * q0.b1, 2 * q0.b2, sym23),
        (-(q0.s1 + q0.b1), -(q0.s2 + q0.b2), sym13),
        (q0.s1 - q0.b1, q0.s2 - q0.b2, sym12),
    ]
    out = []
    for a1, a2, sym in coeffs:
        xi = QPair.from_matrices(a1 * sym, a2 * sym)
        if xi.norm() > 1e-12:
            out.append(xi)
    return tuple(out)


def hessian_spectrum(
    q0: BiaxialForm,
    c: BulkCoefficients,
    rule: QuadratureRule | None = None,
    zero_tol: float = 1e-6,
) -> HessianSpectrum:
    q = q0.as_qpair()
    if bulk_gradient(q, c, rule).norm() >= STATIONARY_TOL:
        raise ValueError("hessian_spectrum requires a stationary point")
    h = bulk_hessian(q, c, rule)
    lam, vec = np.linalg.eigh(h)

    xis = kernel_tangents(q0)
    if xis:
        raw = np.stack([x.coords for x in xis], axis=1)
        qmat, _ = np.linalg.qr(raw)
        kernel_basis = qmat[:, : raw.shape[1]]
    else:
        kernel_basis = np.zeros((10, 0))

    num_kernel = vec[:, np.abs(lam) < zero_tol]
    if kernel_basis.shape[1] and num_kernel.shape[1]:
        angles = scipy.linalg.subspace_angles(kernel_basis, num_kernel)
        xi_angle = float(angles.max())
    else:
        xi_angle = float("nan") if kernel_basis.shape[1] != num_kernel.shape[1] else 0.0

    pos = lam >= zero_tol
    return HessianSpectrum(
        eigenvalues=lam,
        eigenvectors=tuple(QPair.from_coords(vec[:, j]) for j in range(10)),
        kernel=xis,
        kernel_basis=kernel_basis,
        positive_basis=tuple(QPair.from_coords(vec[:, j]) for j in np.where(pos)[0]),
        positive_eigenvalues=lam[pos],
        xi_angle=xi_angle,
        zero_tol=zero_tol,
    )


def project_in(q: QPair, spec: HessianSpectrum) -> QPair:
    """Component of q in the rotation-tangent span of the spectrum."""
    b = spec.kernel_basis
    return QPair.from_coords(b @ (b.T @ q.coords))


def project_out(q: QPair, spec: HessianSpectrum) -> QPair:
    """Complementary component; project_in + project_out = identity."""
    b = spec.kernel_basis
    return QPair.from_coords(q.coords - b @ (b.T @ q.coords))


# ---------------------------------------------------------------------------
# verification report
# ---------------------------------------------------------------------------


def verify_assumption1(
    c: BulkCoefficients,
    rule: QuadratureRule | None = None,
    starts: int = 12,
    seed: int = 0,
) -> dict:
    """Find the minimizer and check the kernel structure of its Hessian.

    Passes iff the kernel has dimension 3 and coincides (angle < 1e-5 rad)
    with the span of the analytic rotation tangents.
    """
    q0 = find_minimizer(c, rule, starts=starts, seed=seed)
    spec = hessian_spectrum(q0, c, rule)
    kernel_dim = spec.kernel_dim
    ok = kernel_dim == 3 and np.isfinite(spec.xi_angle) and spec.xi_angle < 1e-5
    return {
        "coefficients": c.to_json(),
        "minimizer": q0.to_json(),
        "energy": bulk_energy(q0.as_qpair(), c, rule),
        "eigenvalues": [float(v) for v in spec.eigenvalues],
        "kernel_dim": kernel_dim,
        "xi_angle": spec.xi_angle,
        "smallest_positive": spec.smallest_positive,
        "pass": bool(ok),
    }
