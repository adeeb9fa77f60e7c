"""Quadrature over SO(3) with normalized Haar measure.

A product rule in ZYZ Euler angles: Gauss-Legendre nodes in cos(beta) and
uniform periodic grids in alpha and gamma.  The rule integrates Wigner
polynomials exactly up to its degree, which is far beyond the fourth-order
monomials needed here; the Boltzmann exponential converges spectrally.
"""

from __future__ import annotations

import numpy as np

from .tensor_core import Frame, QPair, coords_from_matrix

__all__ = ["QuadratureRule", "build_rule"]


class QuadratureRule:
    """Immutable node/weight set over SO(3); weights sum to 1.

    `rotations[k]` is the rotation matrix of node k; its columns are the body
    axes (m1, m2, m3) expressed in the lab frame.  Feature arrays used by the
    entropy and closure modules are computed lazily and cached.
    """

    def __init__(self, rotations: np.ndarray, weights: np.ndarray):
        rotations = np.asarray(rotations, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if rotations.ndim != 3 or rotations.shape[1:] != (3, 3):
            raise ValueError("rotations must have shape (N, 3, 3)")
        if weights.shape != (rotations.shape[0],):
            raise ValueError("weights must match the number of nodes")
        if np.any(weights <= 0):
            raise ValueError("all weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 (normalized Haar)")
        self.rotations = rotations
        self.weights = weights
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def nodes(self):
        """The nodes as Frame objects (slow; for generic callers only)."""
        return [Frame(r) for r in self.rotations]

    # ---- cached feature arrays ------------------------------------------

    @property
    def m1(self) -> np.ndarray:
        return self.rotations[:, :, 0]

    @property
    def m2(self) -> np.ndarray:
        return self.rotations[:, :, 1]

    @property
    def m3(self) -> np.ndarray:
        return self.rotations[:, :, 2]

    @property
    def coords2(self) -> np.ndarray:
        """(N, 10) coordinates of (m1^2 - I/3, m2^2 - I/3) per node."""
        if "coords2" not in self._cache:
            eye3 = np.eye(3) / 3.0
            f1 = coords_from_matrix(np.einsum("ni,nj->nij", self.m1, self.m1) - eye3)
            f2 = coords_from_matrix(np.einsum("ni,nj->nij", self.m2, self.m2) - eye3)
            self._cache["coords2"] = np.concatenate([f1, f2], axis=1)
        return self._cache["coords2"]

    @property
    def w_feat(self) -> np.ndarray:
        """(N, 27): m1_i m2_j m3_k per node."""
        if "w_feat" not in self._cache:
            self._cache["w_feat"] = np.einsum(
                "ni,nj,nk->nijk", self.m1, self.m2, self.m3
            ).reshape(len(self), 27)
        return self._cache["w_feat"]

    @property
    def k11_feat(self) -> np.ndarray:
        if "k11_feat" not in self._cache:
            mm = np.einsum("ni,nj->nij", self.m1, self.m1)
            self._cache["k11_feat"] = np.einsum("nij,nkl->nijkl", mm, mm).reshape(len(self), 81)
        return self._cache["k11_feat"]

    @property
    def k22_feat(self) -> np.ndarray:
        if "k22_feat" not in self._cache:
            mm = np.einsum("ni,nj->nij", self.m2, self.m2)
            self._cache["k22_feat"] = np.einsum("nij,nkl->nijkl", mm, mm).reshape(len(self), 81)
        return self._cache["k22_feat"]

    @property
    def k12_feat(self) -> np.ndarray:
        if "k12_feat" not in self._cache:
            aa = np.einsum("ni,nj->nij", self.m1, self.m1)
            bb = np.einsum("nk,nl->nkl", self.m2, self.m2)
            self._cache["k12_feat"] = np.einsum("nij,nkl->nijkl", aa, bb).reshape(len(self), 81)
        return self._cache["k12_feat"]

    # ---- density handling ------------------------------------------------

    def log_density(self, bcoords: np.ndarray) -> np.ndarray:
        """Unnormalized log of exp(B1.m1^2 + B2.m2^2) at every node.

        `bcoords` are the 10 coordinates of the (traceless) conjugate pair;
        tracelessness makes B.m^2 = B.(m^2 - I/3).
        """
        return self.coords2 @ np.asarray(bcoords, dtype=float)

    def boltzmann_weights(self, bcoords: np.ndarray | None) -> tuple[np.ndarray, float]:
        """Normalized node weights under the Boltzmann density and ln Z.

        The max exponent is subtracted before exponentiation to avoid
        overflow; ln Z is returned with the shift restored.
        """
        if bcoords is None:
            return self.weights, 0.0
        psi = self.log_density(bcoords)
        shift = psi.max()
        w = self.weights * np.exp(psi - shift)
        z = w.sum()
        return w / z, shift + np.log(z)


def build_rule(n_beta: int, n_torus: int) -> QuadratureRule:
    """ZYZ Euler product rule with n_beta Gauss-Legendre nodes in cos(beta)."""
    if n_beta < 2 or n_torus < 2:
        raise ValueError("n_beta and n_torus must both be at least 2")
    xb, wb = np.polynomial.legendre.leggauss(n_beta)
    beta = np.arccos(xb)
    alpha = 2.0 * np.pi * np.arange(n_torus) / n_torus
    gamma = 2.0 * np.pi * np.arange(n_torus) / n_torus

    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)

    # R = Rz(alpha) Ry(beta) Rz(gamma), assembled on the product grid
    A, B, G = np.meshgrid(np.arange(n_torus), np.arange(n_beta), np.arange(n_torus),
                          indexing="ij")
    ca, sa = ca[A], sa[A]
    cb, sb = cb[B], sb[B]
    cg, sg = cg[G], sg[G]

    r = np.empty(A.shape + (3, 3))
    r[..., 0, 0] = ca * cb * cg - sa * sg
    r[..., 0, 1] = -ca * cb * sg - sa * cg
    r[..., 0, 2] = ca * sb
    r[..., 1, 0] = sa * cb * cg + ca * sg
    r[..., 1, 1] = -sa * cb * sg + ca * cg
    r[..., 1, 2] = sa * sb
    r[..., 2, 0] = -sb * cg
    r[..., 2, 1] = sb * sg
    r[..., 2, 2] = cb

    w = np.broadcast_to(wb[B] / (2.0 * n_torus * n_torus), A.shape)
    rule = QuadratureRule(r.reshape(-1, 3, 3), (w / w.sum() * 1.0).reshape(-1).copy())
    return rule


def average(rule: QuadratureRule, b, f) -> np.ndarray:
    """Average of f(frame) under the maximum entropy density with parameter b.

    `b` may be None or "uniform" (Haar), a QPair, or a pair of 3x3 arrays.
    `f` maps a Frame to a scalar or ndarray; nodes are reduced in fixed order.
    """
    bcoords = _bcoords(b)
    w, _ = rule.boltzmann_weights(bcoords)
    total = None
    for k in range(len(rule)):
        val = np.asarray(f(Frame(rule.rotations[k])), dtype=float)
        total = w[k] * val if total is None else total + w[k] * val
    return total


def _bcoords(b) -> np.ndarray | None:
    if b is None or (isinstance(b, str) and b == "uniform"):
        return None
    if isinstance(b, QPair):
        return b.coords
    if hasattr(b, "coords"):
        return np.asarray(b.coords, dtype=float)
    b1, b2 = b
    b1 = b1 if isinstance(b1, np.ndarray) else b1.to_matrix()
    b2 = b2 if isinstance(b2, np.ndarray) else b2.to_matrix()
    return np.concatenate([coords_from_matrix(b1), coords_from_matrix(b2)])
