"""Exact algebra for symmetric traceless tensors, SO(3) frames and rotational derivatives.

Everything in this module is pure and immutable.  The pair order parameter
lives in a 10-dimensional linear space; we fix once and for all an orthonormal
basis (unit Frobenius norm) of the 5-dimensional space of 3x3 symmetric
traceless matrices and represent pairs by their 10 coordinates.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SYM_BASIS",
    "SymTraceless2",
    "QPair",
    "Frame",
    "LocalBasis",
    "Tensor4Op",
    "OutOfDomainError",
    "ConvergenceError",
    "sym_traceless_project",
    "coords_from_matrix",
    "matrix_from_coords",
    "monomial",
    "local_basis",
    "lie_derivative",
    "domain_membership",
    "rotation_rep5",
    "rotation_rep10",
]


class OutOfDomainError(ValueError):
    """Raised when a tensor pair leaves the admissible physical range."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve fails to reach its tolerance."""


def _build_sym_basis() -> np.ndarray:
    """Orthonormal basis of symmetric traceless 3x3 matrices.

    The basis is the identity-frame local basis (n1^2 - I/3, n2^2 - n3^2,
    n1n2, n1n3, n2n3) rescaled to unit Frobenius norm.
    """
    b = np.zeros((5, 3, 3))
    b[0] = np.diag([2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]) * np.sqrt(1.5)
    b[1] = np.diag([0.0, 1.0, -1.0]) / np.sqrt(2.0)
    b[2][0, 1] = b[2][1, 0] = 1.0 / np.sqrt(2.0)
    b[3][0, 2] = b[3][2, 0] = 1.0 / np.sqrt(2.0)
    b[4][1, 2] = b[4][2, 1] = 1.0 / np.sqrt(2.0)
    return b


SYM_BASIS = _build_sym_basis()
# flattened (5, 9) view used to convert 4th-order operators to the 5-basis
SYM_BASIS_FLAT = SYM_BASIS.reshape(5, 9)


def coords_from_matrix(m: np.ndarray) -> np.ndarray:
    """Coordinates of (the symmetric traceless part of) m in the fixed basis.

    Broadcasts over leading axes: m has shape (..., 3, 3).
    """
    return np.einsum("...ij,kij->...k", m, SYM_BASIS)


def matrix_from_coords(c: np.ndarray) -> np.ndarray:
    """Dense 3x3 matrix (broadcast over leading axes of c with shape (..., 5))."""
    return np.einsum("...k,kij->...ij", c, SYM_BASIS)


def sym_traceless_project(m: np.ndarray) -> "SymTraceless2":
    """Project a 3x3 matrix onto its symmetric traceless part."""
    m = np.asarray(m, dtype=float)
    p = 0.5 * (m + m.T) - (np.trace(m) / 3.0) * np.eye(3)
    return SymTraceless2(coords_from_matrix(p))


def sym_traceless_part(m: np.ndarray) -> np.ndarray:
    """Symmetric traceless part as a dense matrix; broadcasts over (..., 3, 3)."""
    mt = np.swapaxes(m, -1, -2)
    tr = np.trace(m, axis1=-2, axis2=-1)[..., None, None]
    return 0.5 * (m + mt) - (tr / 3.0) * np.eye(3)


@dataclass(frozen=True)
class SymTraceless2:
    """A symmetric traceless second-order tensor, stored by its 5 coordinates."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (5,):
            raise ValueError(f"expected 5 coordinates, got shape {c.shape}")
        object.__setattr__(self, "coords", c)

    @classmethod
    def zero(cls) -> "SymTraceless2":
        return cls(np.zeros(5))

    @classmethod
    def from_matrix(cls, m: np.ndarray, tol: float = 1e-10) -> "SymTraceless2":
        m = np.asarray(m, dtype=float)
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.T).max() > tol * scale or abs(np.trace(m)) > tol * scale:
            raise ValueError("matrix is not symmetric traceless; use sym_traceless_project")
        return cls(coords_from_matrix(m))

    def to_matrix(self) -> np.ndarray:
        return matrix_from_coords(self.coords)

    def dot(self, other: "SymTraceless2") -> float:
        return float(self.coords @ other.coords)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))

    def __add__(self, other: "SymTraceless2") -> "SymTraceless2":
        return SymTraceless2(self.coords + other.coords)

    def __sub__(self, other: "SymTraceless2") -> "SymTraceless2":
        return SymTraceless2(self.coords - other.coords)

    def __mul__(self, a: float) -> "SymTraceless2":
        return SymTraceless2(self.coords * a)

    __rmul__ = __mul__


@dataclass(frozen=True)
class QPair:
    """The order parameter: a pair of symmetric traceless tensors (10 dof)."""

    q1: SymTraceless2
    q2: SymTraceless2

    @classmethod
    def zero(cls) -> "QPair":
        return cls(SymTraceless2.zero(), SymTraceless2.zero())

    @classmethod
    def from_coords(cls, c: np.ndarray) -> "QPair":
        c = np.asarray(c, dtype=float)
        if c.shape != (10,):
            raise ValueError(f"expected 10 coordinates, got shape {c.shape}")
        return cls(SymTraceless2(c[:5].copy()), SymTraceless2(c[5:].copy()))

    @classmethod
    def from_matrices(cls, m1: np.ndarray, m2: np.ndarray) -> "QPair":
        return cls(SymTraceless2.from_matrix(m1), SymTraceless2.from_matrix(m2))

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([self.q1.coords, self.q2.coords])

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return self.q1.to_matrix(), self.q2.to_matrix()

    def dot(self, other: "QPair") -> float:
        return float(self.coords @ other.coords)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))

    def __add__(self, other: "QPair") -> "QPair":
        return QPair(self.q1 + other.q1, self.q2 + other.q2)

    def __sub__(self, other: "QPair") -> "QPair":
        return QPair(self.q1 - other.q1, self.q2 - other.q2)

    def __mul__(self, a: float) -> "QPair":
        return QPair(self.q1 * a, self.q2 * a)

    __rmul__ = __mul__

    def to_json(self) -> dict:
        m1, m2 = self.matrices()
        return {"q1": m1.tolist(), "q2": m2.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "QPair":
        return cls.from_matrices(np.array(d["q1"]), np.array(d["q2"]))


@dataclass(frozen=True)
class Frame:
    """A right-handed orthonormal frame; columns of mat are the axes n1, n2, n3."""

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("frame matrix must be 3x3")
        if np.abs(m.T @ m - np.eye(3)).max() > 1e-12:
            raise ValueError("frame columns are not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-12:
            raise ValueError("frame is not right-handed (det != +1)")
        object.__setattr__(self, "mat", m)

    @classmethod
    def identity(cls) -> "Frame":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float) -> "Frame":
        return cls(rotation_matrix(axis, angle))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Frame":
        a = rng.standard_normal((3, 3))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, [1, 2]] = q[:, [2, 1]]
        return cls(q)

    @property
    def n1(self) -> np.ndarray:
        return self.mat[:, 0]

    @property
    def n2(self) -> np.ndarray:
        return self.mat[:, 1]

    @property
    def n3(self) -> np.ndarray:
        return self.mat[:, 2]

    def rotate_about_axis(self, k: int, angle: float) -> "Frame":
        """Rotate the whole frame about its own axis n_k (k in {1,2,3})."""
        axis = self.mat[:, k - 1]
        return Frame(rotation_matrix(axis, angle) @ self.mat)

    def to_json(self) -> list:
        return self.mat.tolist()

    @classmethod
    def from_json(cls, rows: list) -> "Frame":
        return cls(np.array(rows, dtype=float))


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation by `angle` about the unit vector `axis` (Rodrigues formula)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@dataclass(frozen=True)
class LocalBasis:
    """Local tensor basis of a frame: five symmetric traceless + three antisymmetric."""

    s1: SymTraceless2
    s2: SymTraceless2
    s3: SymTraceless2
    s4: SymTraceless2
    s5: SymTraceless2
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray

    @property
    def s(self) -> tuple[SymTraceless2, ...]:
        return (self.s1, self.s2, self.s3, self.s4, self.s5)


def local_basis(frame: Frame) -> LocalBasis:
    """s1 = n1^2 - I/3, s2 = n2^2 - n3^2, s3 = n1n2, s4 = n1n3, s5 = n2n3."""
    n1, n2, n3 = frame.n1, frame.n2, frame.n3
    s1 = np.outer(n1, n1) - np.eye(3) / 3.0
    s2 = np.outer(n2, n2) - np.outer(n3, n3)
    s3 = 0.5 * (np.outer(n1, n2) + np.outer(n2, n1))
    s4 = 0.5 * (np.outer(n1, n3) + np.outer(n3, n1))
    s5 = 0.5 * (np.outer(n2, n3) + np.outer(n3, n2))
    a1 = np.outer(n1, n2) - np.outer(n2, n1)
    a2 = np.outer(n3, n1) - np.outer(n1, n3)
    a3 = np.outer(n2, n3) - np.outer(n3, n2)
    return LocalBasis(*(SymTraceless2.from_matrix(s) for s in (s1, s2, s3, s4, s5)), a1, a2, a3)


def monomial(frame: Frame, powers: tuple[int, int, int]) -> np.ndarray:
    """Fully symmetrized tensor power n1^k1 n2^k2 n3^k3 of the frame axes.

    Returns a dense symmetric array of order k1+k2+k3 (at most 4).
    """
    k1, k2, k3 = powers
    order = k1 + k2 + k3
    if order > 4:
        raise ValueError("monomials are only supported up to order 4")
    if order == 0:
        return np.array(1.0)
    vecs = [frame.n1] * k1 + [frame.n2] * k2 + [frame.n3] * k3
    out = np.zeros((3,) * order)
    perms = list(itertools.permutations(range(order)))
    for p in perms:
        t = np.array(1.0)
        for idx in p:
            t = np.multiply.outer(t, vecs[idx])
        out += t
    return out / len(perms)


def lie_derivative(k: int, f, frame: Frame, h: float = 1e-5) -> QPair:
    """Derivative of a frame-dependent pair map along the rotation about n_k.

    If `f` exposes a closed-form `lie_derivative(k, frame)` it is used (exact
    chain rule via the rotation action on the frame axes); otherwise a central
    finite difference of the rotated frame is taken.
    """
    if k not in (1, 2, 3):
        raise ValueError("axis index must be 1, 2 or 3")
    if hasattr(f, "lie_derivative"):
        return f.lie_derivative(k, frame)
    plus = f(frame.rotate_about_axis(k, h))
    minus = f(frame.rotate_about_axis(k, -h))
    return QPair.from_coords((plus.coords - minus.coords) / (2.0 * h))


def domain_matrices(q: QPair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three matrices whose positive definiteness defines the physical range."""
    m1, m2 = q.matrices()
    eye3 = np.eye(3) / 3.0
    return m1 + eye3, m2 + eye3, eye3 - m1 - m2


def domain_membership(q: QPair, delta: float = 0.0) -> bool:
    """True iff Q1 + I/3, Q2 + I/3 and I/3 - Q1 - Q2 all have min eigenvalue >= delta."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    for m in domain_matrices(q):
        if np.linalg.eigvalsh(m)[0] < delta:
            return False
    return True


def min_domain_eigenvalue(q: QPair) -> float:
    """Smallest eigenvalue across the three domain matrices (signed boundary margin)."""
    return min(float(np.linalg.eigvalsh(m)[0]) for m in domain_matrices(q))


@dataclass(frozen=True)
class Tensor4Op:
    """A fourth-order tensor viewed as a linear map on 3x3 matrices (dense 9x9)."""

    arr: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.arr, dtype=float)
        if a.shape != (9, 9):
            raise ValueError("Tensor4Op needs a 9x9 array")
        object.__setattr__(self, "arr", a)

    @classmethod
    def from_tensor(cls, t: np.ndarray) -> "Tensor4Op":
        """From a dense (3,3,3,3) array T_{ijkl}, row index (ij), column (kl)."""
        return cls(np.asarray(t, dtype=float).reshape(9, 9))

    @classmethod
    def identity(cls) -> "Tensor4Op":
        return cls(np.eye(9))

    def as_tensor(self) -> np.ndarray:
        return self.arr.reshape(3, 3, 3, 3)

    def apply(self, m: np.ndarray) -> np.ndarray:
        return (self.arr @ np.asarray(m, dtype=float).reshape(9)).reshape(3, 3)

    def transpose(self) -> "Tensor4Op":
        return Tensor4Op(self.arr.T)

    @property
    def T(self) -> "Tensor4Op":
        return self.transpose()

    def sym_block(self) -> np.ndarray:
        """The 5x5 restriction to symmetric traceless matrices, in the fixed basis."""
        return SYM_BASIS_FLAT @ self.arr @ SYM_BASIS_FLAT.T

    def __add__(self, other: "Tensor4Op") -> "Tensor4Op":
        return Tensor4Op(self.arr + other.arr)

    def __sub__(self, other: "Tensor4Op") -> "Tensor4Op":
        return Tensor4Op(self.arr - other.arr)

    def __mul__(self, a: float) -> "Tensor4Op":
        return Tensor4Op(self.arr * a)

    __rmul__ = __mul__


def rotation_rep5(r: np.ndarray) -> np.ndarray:
    """5x5 orthogonal matrix representing M -> R M R^T on the fixed basis."""
    rotated = np.einsum("ip,kpq,jq->kij", r, SYM_BASIS, r)
    return np.einsum("kij,lij->lk", rotated, SYM_BASIS)


def rotation_rep10(r: np.ndarray) -> np.ndarray:
    """Block-diagonal action of a rotation on pair coordinates."""
    u = rotation_rep5(r)
    out = np.zeros((10, 10))
    out[:5, :5] = u
    out[5:, 5:] = u
    return out


def qpair_json_dumps(q: QPair) -> str:
    return json.dumps(q.to_json())
