"""Closure approximations: high-order frame moments from the tensor pair.

Two routes are provided.  The maximum-entropy route averages monomials under
the Boltzmann density matching Q.  The quasi route minimizes the fourth-order
log-determinant functional over the affine set of moment states consistent
with Q.  The free directions of that affine set (the third/fourth-order
symmetric-traceless content) are parameterized directly by the raw frame
moments

    W[i,j,k]   = <m1_i m2_j m3_k>,
    K11        = <m1 (x) m1 (x) m1 (x) m1>,
    K22        = <m2 (x) m2 (x) m2 (x) m2>,
    K12        = <m1 (x) m1 (x) m2 (x) m2>,

subject to linear consistency constraints (index symmetries, traces, frame
orthonormality and completeness, second-moment match with Q).  Every entry of
the fourth-order log-determinant functional and all seven kinetic tensors are
linear in these variables, so the convex minimization is exactly reproduced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .entropy import ConjugatePair, solve_conjugate
from .so3_quad import QuadratureRule
from .tensor_core import (
    ConvergenceError,
    OutOfDomainError,
    QPair,
    SYM_BASIS,
    SYM_BASIS_FLAT,
    Tensor4Op,
    matrix_from_coords,
)

__all__ = [
    "PhysicalParams",
    "MomentState",
    "ClosureTensors",
    "KineticOperators",
    "moments_from_density",
    "closure_maxent",
    "closure_quasi",
    "assemble_operators",
    "closure_field_quasi",
    "ClosureFieldCache",
]

_EYE = np.eye(3)
_EPSILON3 = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _EPSILON3[_i, _j, _k] = 1.0
    _EPSILON3[_i, _k, _j] = -1.0

XI4_GRAD_TOL = 1e-9
XI4_FIELD_TOL = 1e-7  # field closures: looser; operators stay PSD regardless


@dataclass(frozen=True)
class PhysicalParams:
    """Diffusion, friction and inertia constants of the kinetic operators."""

    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    zeta: float = 1.0
    i11: float = 1.0
    i22: float = 1.0
    i33: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "zeta", "i11", "i22", "i33", "eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def e1(self) -> float:
        return self.i22 / (self.i11 + self.i22)

    @property
    def e2(self) -> float:
        return 1.0 - self.e1


# ---------------------------------------------------------------------------
# moment state
# ---------------------------------------------------------------------------


def _sym4(t: np.ndarray) -> np.ndarray:
    """Full symmetrization of a fourth-order tensor (broadcasts leading axes)."""
    import itertools

    perms = list(itertools.permutations(range(4)))
    nd = t.ndim - 4
    out = np.zeros_like(t)
    for p in perms:
        axes = tuple(range(nd)) + tuple(nd + i for i in p)
        out += np.transpose(t, axes)
    return out / len(perms)


def _uniform_master() -> np.ndarray:
    """Master moment vector of the uniform (Haar) distribution."""
    w = _EPSILON3 / 6.0
    k_same = (
        np.einsum("ab,cd->abcd", _EYE, _EYE)
        + np.einsum("ac,bd->abcd", _EYE, _EYE)
        + np.einsum("ad,bc->abcd", _EYE, _EYE)
    ) / 15.0
    k12 = (
        4.0 * np.einsum("ab,cd->abcd", _EYE, _EYE)
        - np.einsum("ac,bd->abcd", _EYE, _EYE)
        - np.einsum("ad,bc->abcd", _EYE, _EYE)
    ) / 30.0
    return np.concatenate([w.ravel(), k_same.ravel(), k_same.ravel(), k12.ravel()])


def _pack(w, k11, k22, k12) -> np.ndarray:
    return np.concatenate([np.ravel(w), np.ravel(k11), np.ravel(k22), np.ravel(k12)])


def _unpack(x: np.ndarray):
    """Split a (..., 270) master vector into W, K11, K22, K12 arrays."""
    lead = x.shape[:-1]
    w = x[..., :27].reshape(lead + (3, 3, 3))
    k11 = x[..., 27:108].reshape(lead + (3, 3, 3, 3))
    k22 = x[..., 108:189].reshape(lead + (3, 3, 3, 3))
    k12 = x[..., 189:270].reshape(lead + (3, 3, 3, 3))
    return w, k11, k22, k12


@dataclass(frozen=True)
class MomentState:
    """Second-, third- and fourth-order frame moments of a distribution."""

    m1: np.ndarray  # <m1 (x) m1>
    m2: np.ndarray  # <m2 (x) m2>
    w: np.ndarray  # <m1_i m2_j m3_k>
    k11: np.ndarray
    k22: np.ndarray
    k12: np.ndarray

    @property
    def m3_mat(self) -> np.ndarray:
        return _EYE - self.m1 - self.m2

    @property
    def second_moments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.m1, self.m2, self.m3_mat

    @property
    def k13(self) -> np.ndarray:
        return np.einsum("ab,cd->abcd", self.m1, _EYE) - self.k11 - self.k12

    @property
    def k23(self) -> np.ndarray:
        return (
            np.einsum("ab,cd->abcd", self.m2, _EYE)
            - np.einsum("cdab->abcd", self.k12)
            - self.k22
        )

    @property
    def k33(self) -> np.ndarray:
        d = _EYE
        return (
            np.einsum("ab,cd->abcd", d, d)
            - np.einsum("ab,cd->abcd", self.m1 + self.m2, d)
            - np.einsum("ab,cd->abcd", d, self.m1 + self.m2)
            + self.k11 + self.k22 + self.k12 + np.einsum("cdab->abcd", self.k12)
        )

    @property
    def qpair(self) -> QPair:
        from .tensor_core import sym_traceless_project

        return QPair(
            sym_traceless_project(self.m1 - _EYE / 3.0),
            sym_traceless_project(self.m2 - _EYE / 3.0),
        )

    def master_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.w.ravel(), self.k11.ravel(), self.k22.ravel(), self.k12.ravel()]
        )

    @classmethod
    def from_master(cls, x: np.ndarray, m1: np.ndarray, m2: np.ndarray) -> "MomentState":
        w, k11, k22, k12 = _unpack(np.asarray(x, dtype=float))
        return cls(np.asarray(m1, float), np.asarray(m2, float), w, k11, k22, k12)

    def validate(self, tol: float = 1e-10) -> None:
        """Check the structural invariants of a genuine moment state."""
        if np.abs(self.m1 - self.m1.T).max() > tol or np.abs(self.m2 - self.m2.T).max() > tol:
            raise ValueError("second moments must be symmetric")
        for k in (self.k11, self.k22):
            if np.abs(k - _sym4(k)).max() > tol:
                raise ValueError("same-axis fourth moments must be totally symmetric")
        if np.abs(np.einsum("aacd->cd", self.k11) - self.m1).max() > tol:
            raise ValueError("trace of k11 must equal the second moment of m1")
        if np.abs(np.einsum("aacd->cd", self.k12) - self.m2).max() > tol:
            raise ValueError("trace of k12 over the first pair must equal m2 moments")
        if np.abs(np.einsum("abcc->ab", self.k12) - self.m1).max() > tol:
            raise ValueError("trace of k12 over the second pair must equal m1 moments")
        if np.abs(np.einsum("abad->bd", self.k12)).max() > tol:
            raise ValueError("cross contraction of k12 must vanish (orthogonal axes)")
        if np.abs(np.einsum("iik->k", self.w)).max() > tol:
            raise ValueError("paired traces of the third moment must vanish")


# ---------------------------------------------------------------------------
# fourth-order log-determinant blocks
# ---------------------------------------------------------------------------


def _assemble_blocks(w, k11, k22, k12, m1, m2, c):
    """The four Gram matrices of the fourth-order functional.

    All entries are affine in (w, k11, k22, k12, m1, m2); `c` scales the
    purely constant (identity-tensor) contributions so that linear responses
    can be isolated by probing with c = 0.
    """
    d = _EYE
    e = SYM_BASIS  # (5, 3, 3) orthonormal basis used for the s-slots
    m3 = c * d - m1 - m2

    k13 = np.einsum("ab,cd->abcd", m1, d) - k11 - k12
    k23 = np.einsum("ab,cd->abcd", m2, d) - np.einsum("cdab->abcd", k12) - k22
    k33 = (
        c * np.einsum("ab,cd->abcd", d, d)
        - np.einsum("ab,cd->abcd", m1 + m2, d)
        - np.einsum("ab,cd->abcd", d, m1 + m2)
        + k11 + k22 + k12 + np.einsum("cdab->abcd", k12)
    )

    # block 1: Gram of {1, p.e_i, r.e_i}, p = m1^2 - I/3, r = m2^2 - m3^2
    pp = (
        k11
        - np.einsum("ab,cd->abcd", m1, d) / 3.0
        - np.einsum("ab,cd->abcd", d, m1) / 3.0
        + c * np.einsum("ab,cd->abcd", d, d) / 9.0
    )
    # <p_ab r_cd>
    pr = (
        np.einsum("abcd->abcd", k12)
        - k13
        - np.einsum("ab,cd->abcd", d, m2 - m3) / 3.0
    )
    rr = k22 - k23 - np.einsum("cdab->abcd", k23) + k33

    mean_p = m1 - c * d / 3.0
    mean_r = m2 - m3
    b1 = np.zeros((11, 11))
    b1[0, 0] = c
    b1[0, 1:6] = b1[1:6, 0] = np.einsum("ab,kab->k", mean_p, e)
    b1[0, 6:11] = b1[6:11, 0] = np.einsum("ab,kab->k", mean_r, e)
    b1[1:6, 1:6] = np.einsum("kab,abcd,lcd->kl", e, pp, e)
    cross = np.einsum("kab,abcd,lcd->kl", e, pr, e)
    b1[1:6, 6:11] = cross
    b1[6:11, 1:6] = cross.T
    b1[6:11, 6:11] = np.einsum("kab,abcd,lcd->kl", e, rr, e)

    def gram4(kbc):
        # <(m_b m_c).e_i (m_b m_c).e_j> from K_bc[p,q,r,s] = <mb_p mb_q mc_r mc_s>
        g = 0.25 * (
            np.einsum("prqs->pqrs", kbc)
            + np.einsum("psqr->pqrs", kbc)
            + np.einsum("qrps->pqrs", kbc)
            + np.einsum("qspr->pqrs", kbc)
        )
        return np.einsum("kab,abcd,lcd->kl", e, g, e)

    def block_a(ma, wperm, kbc):
        b = np.zeros((8, 8))
        b[:3, :3] = ma
        t = np.einsum("iuv,kuv->ik", wperm, e)
        b[:3, 3:] = t
        b[3:, :3] = t.T
        b[3:, 3:] = gram4(kbc)
        return b

    b2 = block_a(m1, w, k23)  # {m1.n_i, (m2 m3).e_j}
    b3 = block_a(m2, np.einsum("uiv->iuv", w), k13)  # {m2.n_i, (m1 m3).e_j}
    b4 = block_a(m3, np.einsum("uvi->iuv", w), k12)  # {m3.n_i, (m1 m2).e_j}
    return [b1, b2, b3, b4]


_BLOCK_SIZES = (11, 8, 8, 8)


class _ClosureWork:
    """Precomputed linear algebra shared by every quasi-closure solve."""

    def __init__(self):
        self._build_constraints()
        self._build_block_maps()
        self.x_uniform = _uniform_master()

    # -- affine consistency constraints C x = d(M1, M2) --------------------

    def _build_constraints(self):
        rows: list[np.ndarray] = []
        rhs_m1: list[np.ndarray] = []
        rhs_m2: list[np.ndarray] = []
        rhs_c: list[float] = []

        def widx(i, j, k):
            return (i * 3 + j) * 3 + k

        def kidx(base, a, b, c_, d_):
            return base + ((a * 3 + b) * 3 + c_) * 3 + d_

        def add(coeffs, rm1=None, rm2=None, rc=0.0):
            row = np.zeros(270)
            for idx, v in coeffs:
                row[idx] += v
            rows.append(row)
            rhs_m1.append(np.zeros((3, 3)) if rm1 is None else rm1)
            rhs_m2.append(np.zeros((3, 3)) if rm2 is None else rm2)
            rhs_c.append(rc)

        def unit(i, j):
            m = np.zeros((3, 3))
            m[i, j] = 1.0
            return m

        # third-moment antisymmetry families (frame cross products)
        for i in range(3):
            for j in range(3):
                for k in range(j + 1, 3):
                    rm1 = sum((_EPSILON3[j, k, p] * unit(i, p) for p in range(3)),
                              np.zeros((3, 3)))
                    add([(widx(i, j, k), 1.0), (widx(i, k, j), -1.0)], rm1=rm1)
        for j in range(3):
            for i in range(3):
                for k in range(i + 1, 3):
                    rm2 = sum((-_EPSILON3[i, k, p] * unit(j, p) for p in range(3)),
                              np.zeros((3, 3)))
                    add([(widx(i, j, k), 1.0), (widx(k, j, i), -1.0)], rm2=rm2)
        for k in range(3):
            for i in range(3):
                for j in range(i + 1, 3):
                    # rhs eps_{ijp} M3[p,k] with M3 = I - M1 - M2
                    rm1 = sum((-_EPSILON3[i, j, p] * unit(p, k) for p in range(3)),
                              np.zeros((3, 3)))
                    rm2 = rm1.copy()
                    add(
                        [(widx(i, j, k), 1.0), (widx(j, i, k), -1.0)],
                        rm1=rm1, rm2=rm2, rc=float(_EPSILON3[i, j, k]),
                    )
        # vanishing paired traces of the third moment
        for k in range(3):
            add([(widx(i, i, k), 1.0) for i in range(3)])
            add([(widx(i, k, i), 1.0) for i in range(3)])
            add([(widx(k, i, i), 1.0) for i in range(3)])

        # total symmetry of the same-axis fourth moments
        import itertools

        for base, which in ((27, "k11"), (108, "k22")):
            for idx in itertools.product(range(3), repeat=4):
                canon = tuple(sorted(idx))
                if idx != canon:
                    add([(kidx(base, *idx), 1.0), (kidx(base, *canon), -1.0)])
            # trace equals the matching second moment
            for c_ in range(3):
                for d_ in range(3):
                    rm = unit(c_, d_)
                    add(
                        [(kidx(base, a, a, c_, d_), 1.0) for a in range(3)],
                        rm1=rm if which == "k11" else None,
                        rm2=rm if which == "k22" else None,
                    )

        # K12: pair symmetries, pair traces, vanishing cross contraction
        base = 189
        for a in range(3):
            for b in range(a + 1, 3):
                for c_ in range(3):
                    for d_ in range(3):
                        add([(kidx(base, a, b, c_, d_), 1.0), (kidx(base, b, a, c_, d_), -1.0)])
        for c_ in range(3):
            for d_ in range(c_ + 1, 3):
                for a in range(3):
                    for b in range(3):
                        add([(kidx(base, a, b, c_, d_), 1.0), (kidx(base, a, b, d_, c_), -1.0)])
        for c_ in range(3):
            for d_ in range(3):
                add([(kidx(base, a, a, c_, d_), 1.0) for a in range(3)], rm2=unit(c_, d_))
        for a in range(3):
            for b in range(3):
                add([(kidx(base, a, b, c_, c_), 1.0) for c_ in range(3)], rm1=unit(a, b))
        for b in range(3):
            for d_ in range(3):
                add([(kidx(base, a, b, a, d_), 1.0) for a in range(3)])

        self.C = np.array(rows)
        self.rhs_m1 = np.array([m.ravel() for m in rhs_m1])  # (R, 9)
        self.rhs_m2 = np.array([m.ravel() for m in rhs_m2])
        self.rhs_c = np.array(rhs_c)

        u, s, vt = np.linalg.svd(self.C, full_matrices=True)
        rank = int(np.sum(s > 1e-10 * s[0]))
        self.rank = rank
        self.null = vt[rank:].T.copy()  # (270, n_free), orthonormal columns
        self.n_free = self.null.shape[1]
        self.pinv_C = np.linalg.pinv(self.C, rcond=1e-10)

    def rhs(self, m1f: np.ndarray, m2f: np.ndarray) -> np.ndarray:
        """Constraint right-hand side; m1f/m2f are (..., 9) flattened moments."""
        return m1f @ self.rhs_m1.T + m2f @ self.rhs_m2.T + self.rhs_c

    # -- linearized block assembly -----------------------------------------

    def _build_block_maps(self):
        zero_vars = [np.zeros((3, 3, 3))] + [np.zeros((3, 3, 3, 3))] * 3
        z33 = np.zeros((3, 3))

        tx = [np.zeros((s * s, 270)) for s in _BLOCK_SIZES]
        for col in range(270):
            x = np.zeros(270)
            x[col] = 1.0
            blocks = _assemble_blocks(*_unpack(x), z33, z33, 0.0)
            for bi in range(4):
                tx[bi][:, col] = blocks[bi].ravel()
        tm1 = [np.zeros((s * s, 9)) for s in _BLOCK_SIZES]
        tm2 = [np.zeros((s * s, 9)) for s in _BLOCK_SIZES]
        for col in range(9):
            m = np.zeros(9)
            m[col] = 1.0
            blocks = _assemble_blocks(*zero_vars, m.reshape(3, 3), z33, 0.0)
            for bi in range(4):
                tm1[bi][:, col] = blocks[bi].ravel()
            blocks = _assemble_blocks(*zero_vars, z33, m.reshape(3, 3), 0.0)
            for bi in range(4):
                tm2[bi][:, col] = blocks[bi].ravel()
        tc = [b.ravel().copy() for b in _assemble_blocks(*zero_vars, z33, z33, 1.0)]
        self.t_x, self.t_m1, self.t_m2, self.t_c = tx, tm1, tm2, tc

        # responses of each block to the free (nullspace) directions
        self.b_free = [
            (tx[bi] @ self.null).T.reshape(self.n_free, s, s)
            for bi, s in enumerate(_BLOCK_SIZES)
        ]
        # (s, n_free*s) layouts used to turn Newton linear algebra into GEMMs
        self.b_mat = [
            self.b_free[bi].transpose(1, 0, 2).reshape(s, self.n_free * s)
            for bi, s in enumerate(_BLOCK_SIZES)
        ]
        self.b_flat = [
            self.b_free[bi].reshape(self.n_free, s * s)
            for bi, s in enumerate(_BLOCK_SIZES)
        ]

    def base_blocks(self, xp: np.ndarray, m1f: np.ndarray, m2f: np.ndarray):
        """Blocks at the particular solution; batched over leading axes."""
        out = []
        for bi, s in enumerate(_BLOCK_SIZES):
            flat = xp @ self.t_x[bi].T + m1f @ self.t_m1[bi].T + m2f @ self.t_m2[bi].T
            flat = flat + self.t_c[bi]
            out.append(flat.reshape(xp.shape[:-1] + (s, s)))
        return out


_WORK: _ClosureWork | None = None


def _work() -> _ClosureWork:
    global _WORK
    if _WORK is None:
        _WORK = _ClosureWork()
    return _WORK


def xi4_free_dimension() -> int:
    """Number of free moment directions at fixed Q."""
    return _work().n_free


# ---------------------------------------------------------------------------
# quasi-closure Newton solver (batched)
# ---------------------------------------------------------------------------


def _min_eig(blocks) -> np.ndarray:
    """Minimum eigenvalue across the four blocks, batched."""
    vals = [np.linalg.eigvalsh(b)[..., 0] for b in blocks]
    return np.minimum.reduce(vals)


def _blocks_at(a0_blocks, y: np.ndarray):
    """Gram blocks at free coordinates y (GEMM against the flat layouts)."""
    wk = _work()
    n = y.shape[0]
    return [
        a0 + (y @ bf).reshape(n, a0.shape[-1], a0.shape[-1])
        for a0, bf in zip(a0_blocks, wk.b_flat)
    ]


def _feasible_mask(blocks) -> np.ndarray:
    """Per-node positive definiteness; Cholesky fast path, eigvalsh fallback."""
    try:
        for b in blocks:
            np.linalg.cholesky(b)
        return np.ones(blocks[0].shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        return _min_eig(blocks) > 0


def _feasible_and_value(blocks):
    """(feasibility mask, functional value with +inf at infeasible nodes)."""
    try:
        total = 0.0
        for b in blocks:
            c = np.linalg.cholesky(b)
            diag = np.einsum("...ii->...i", c)
            total = total - 2.0 * np.sum(np.log(diag), axis=-1)
        return np.ones(blocks[0].shape[0], dtype=bool), total
    except np.linalg.LinAlgError:
        feas = _min_eig(blocks) > 0
        vals = np.full(blocks[0].shape[0], np.inf)
        if feas.any():
            vals[feas] = _xi4_value([b[feas] for b in blocks])
        return feas, vals


def _xi4_value(blocks) -> np.ndarray:
    total = 0.0
    for b in blocks:
        sign, logdet = np.linalg.slogdet(b)
        logdet = np.where(sign > 0, logdet, -np.inf)
        total = total - logdet
    return total


def _xi4_grad(bl, return_inv: bool = False):
    """Gradient in the free directions; cheap (block inverses only).

    grad_f = -sum_m tr(A_m^{-1} B_{m,f}); with symmetric blocks this is a
    flat dot product, done as one GEMM per block.
    """
    wk = _work()
    n = bl[0].shape[0]
    grad = np.zeros((n, wk.n_free))
    invs = []
    for bi, s in enumerate(_BLOCK_SIZES):
        inv = np.linalg.inv(bl[bi])
        grad -= inv.reshape(n, s * s) @ wk.b_flat[bi].T
        if return_inv:
            invs.append(inv)
    return (grad, invs) if return_inv else grad


def _xi4_hess(invs):
    """Hessian in the free directions from precomputed block inverses.

    H_fg = sum_m tr(A^{-1}B_f A^{-1}B_g) = vec(A^{-1}B_f A^{-1}) . vec(B_g),
    evaluated with batched matmuls and one trailing GEMM per block.
    """
    wk = _work()
    n = invs[0].shape[0]
    nf = wk.n_free
    hess = np.zeros((n, nf, nf))
    for bi, s in enumerate(_BLOCK_SIZES):
        x = (invs[bi].reshape(n * s, s) @ wk.b_mat[bi]).reshape(n, s, nf, s)
        y = np.matmul(x.transpose(0, 2, 1, 3), invs[bi][:, None])  # A^{-1}B_f A^{-1}
        hess += (y.reshape(n * nf, s * s) @ wk.b_flat[bi].T).reshape(n, nf, nf)
    return 0.5 * (hess + hess.transpose(0, 2, 1))


def _hess_inv(a0_blocks, y: np.ndarray) -> np.ndarray:
    """Inverse Hessian in the free directions at y, batched."""
    wk = _work()
    bl = [a0 + np.einsum("nf,fab->nab", y, bf) for a0, bf in zip(a0_blocks, wk.b_free)]
    _, invs = _xi4_grad(bl, return_inv=True)
    return np.linalg.inv(_xi4_hess(invs))


def _chord_solve(a0_blocks, y0: np.ndarray, hinv: np.ndarray, max_iters: int = 20,
                 tol: float = XI4_GRAD_TOL):
    """Damped chord iterations with a frozen inverse Hessian.

    Used for warm restarts in time stepping where the true Hessian moves
    little between calls; nodes whose line search stalls are left
    unconverged for the full Newton fallback.  Returns (y, converged,
    per-node iteration counts) — a large count signals a stale hinv.
    """
    n = y0.shape[0]
    y = y0.copy()
    blocks = _blocks_at(a0_blocks, y)
    conv = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    feas0 = _feasible_mask(blocks)
    if not feas0.any():
        return y, conv, iters
    for bi in range(4):
        blocks[bi][~feas0] = np.eye(blocks[bi].shape[-1])
    idx = np.where(feas0)[0]
    for _ in range(max_iters):
        bl = [b[idx] for b in blocks]
        grad = _xi4_grad(bl)
        done = np.abs(grad).max(axis=1) <= tol
        conv[idx[done]] = True
        idx = idx[~done]
        if idx.size == 0:
            break
        iters[idx] += 1
        grad = grad[~done]
        bl = [b[idx] for b in blocks]
        _, value = _feasible_and_value(bl)
        step = -np.einsum("nij,nj->ni", hinv[idx], grad)
        slope = np.einsum("nf,nf->n", grad, step)
        alpha = np.ones(idx.size)
        moved = np.zeros(idx.size, dtype=bool)
        a0_sub = [a[idx] for a in a0_blocks]
        for _ in range(25):
            need = ~moved
            y_try = y[idx[need]] + alpha[need, None] * step[need]
            bt = _blocks_at([a[need] for a in a0_sub], y_try)
            feasible, value_try = _feasible_and_value(bt)
            slack = 1e-12 * (1.0 + np.abs(value[need]))
            ok = feasible & (value_try <= value[need] + 1e-4 * alpha[need] * slope[need] + slack)
            moved[np.where(need)[0][ok]] = True
            if moved.all():
                break
            alpha[~moved] *= 0.5
        alpha[~moved] = 0.0
        y[idx] = y[idx] + alpha[:, None] * step
        new_bl = _blocks_at(a0_sub, y[idx])
        for bi in range(4):
            blocks[bi][idx] = new_bl[bi]
        idx = idx[moved]
        if idx.size == 0:
            break
    if idx.size:
        bl = [b[idx] for b in blocks]
        grad = _xi4_grad(bl)
        conv[idx[np.abs(grad).max(axis=1) <= tol]] = True
    return y, conv, iters


def _solve_free(a0_blocks, y0: np.ndarray, max_iters: int = 80,
                tol: float = XI4_GRAD_TOL):
    """Damped Newton for the free coefficients; batched over the first axis.

    a0_blocks are the blocks at y = 0; the iterate's blocks are
    A_m(y) = A0_m + sum_i y_i B_{m,i}.  Returns (y, converged_mask).
    """
    wk = _work()
    n = y0.shape[0]
    y = y0.copy()

    def sanitize(bl, feas):
        # freeze infeasible nodes on harmless identity blocks
        if feas.all():
            return bl
        out = []
        for b in bl:
            b = b.copy()
            b[~feas] = np.eye(b.shape[-1])
            out.append(b)
        return out

    blocks = _blocks_at(a0_blocks, y)
    feas0 = _feasible_mask(blocks)
    if not feas0.any():
        return y, feas0.copy(), blocks
    blocks = sanitize(blocks, feas0)
    conv = np.zeros(n, dtype=bool)
    idx = np.where(feas0)[0]
    for _ in range(max_iters):
        bl = [b[idx] for b in blocks]
        grad, invs = _xi4_grad(bl, return_inv=True)
        done = np.abs(grad).max(axis=1) <= tol
        conv[idx[done]] = True
        idx = idx[~done]
        if idx.size == 0:
            break
        grad = grad[~done]
        bl = [b[idx] for b in blocks]
        hess = _xi4_hess([iv[~done] for iv in invs])
        _, value = _feasible_and_value(bl)
        step = np.linalg.solve(hess, -grad[..., None])[..., 0]
        slope = np.einsum("nf,nf->n", grad, step)
        alpha = np.ones(idx.size)
        moved = np.zeros(idx.size, dtype=bool)
        a0_sub = [a[idx] for a in a0_blocks]
        for _ in range(40):
            need = ~moved
            y_try = y[idx[need]] + alpha[need, None] * step[need]
            bt = _blocks_at([a[need] for a in a0_sub], y_try)
            feasible, value_try = _feasible_and_value(bt)
            slack = 1e-12 * (1.0 + np.abs(value[need]))  # float plateau near optimum
            ok = feasible & (value_try <= value[need] + 1e-4 * alpha[need] * slope[need] + slack)
            moved[np.where(need)[0][ok]] = True
            if moved.all():
                break
            alpha[~moved] *= 0.5
        alpha[~moved] = 0.0
        y[idx] = y[idx] + alpha[:, None] * step
        new_bl = _blocks_at(a0_sub, y[idx])
        for bi in range(4):
            blocks[bi][idx] = new_bl[bi]
        # nodes whose line search stalled stay unconverged for the caller
        idx = idx[moved]
        if idx.size == 0:
            break
    if idx.size:
        bl = [b[idx] for b in blocks]
        grad = _xi4_grad(bl)
        conv[idx[np.abs(grad).max(axis=1) <= tol]] = True
    return y, conv, blocks


def _quasi_master_batch(
    qc: np.ndarray,
    y_init: np.ndarray | None = None,
    hinv: np.ndarray | None = None,
    want_hinv: bool = False,
    tol: float = XI4_GRAD_TOL,
):
    """Minimize the fourth-order functional for a batch of pairs.

    qc: (n, 10) coordinates.  Returns (x_master (n, 270), y (n, n_free)),
    plus the per-node inverse Hessians when want_hinv is set (fed back as
    `hinv` on the next call, they enable cheap chord iterations).
    """
    wk = _work()
    qc = np.asarray(qc, dtype=float)
    n = qc.shape[0]
    m1 = matrix_from_coords(qc[:, :5]) + _EYE / 3.0
    m2 = matrix_from_coords(qc[:, 5:]) + _EYE / 3.0
    m1f, m2f = m1.reshape(n, 9), m2.reshape(n, 9)
    xp = wk.rhs(m1f, m2f) @ wk.pinv_C.T
    a0 = wk.base_blocks(xp, m1f, m2f)
    if y_init is None:
        y0 = (wk.x_uniform - xp) @ wk.null
    else:
        y0 = y_init.copy()
    bad = ~_feasible_mask(_blocks_at(a0, y0))
    if bad.any() and y_init is not None:
        # stale warm start: fall back to the uniform blend for those nodes
        y0[bad] = ((wk.x_uniform - xp) @ wk.null)[bad]
        bad = ~_feasible_mask(_blocks_at(a0, y0))
    if bad.any():
        y0 = _continuation_start(qc, bad, y0)

    hinv_new = None
    if hinv is not None and hinv.shape[0] == n:
        y, conv, iters = _chord_solve(a0, y0, hinv, tol=tol)
        if want_hinv:
            hinv_new = hinv
        if not conv.all():
            sub = np.where(~conv)[0]
            a0s = [a[sub] for a in a0]
            ys = _full_solve(qc[sub], a0s, y[sub], tol=tol)
            y = y.copy()
            y[sub] = ys
            if want_hinv:
                hinv_new = hinv.copy()
                hinv_new[sub] = _hess_inv(a0s, ys)
        stale = conv & (iters > 8)
        if want_hinv and stale.any():
            # the frozen Hessian has drifted at these nodes; refresh in place
            sub = np.where(stale)[0]
            if hinv_new is hinv:
                hinv_new = hinv.copy()
            hinv_new[sub] = _hess_inv([a[sub] for a in a0], y[sub])
    else:
        y = _full_solve(qc, a0, y0, tol=tol)
        if want_hinv:
            hinv_new = _hess_inv(a0, y)

    x = xp + y @ wk.null.T
    if want_hinv:
        return x, y, hinv_new
    return x, y


def _full_solve(qc: np.ndarray, a0, y0: np.ndarray, tol: float = XI4_GRAD_TOL) -> np.ndarray:
    """Full Newton with a continuation fallback; raises if any node fails."""
    y, conv, _ = _solve_free(a0, y0, tol=tol)
    if not conv.all():
        y0b = _continuation_start(qc, ~conv, y)
        y2, conv2, _ = _solve_free(a0, y0b, tol=tol)
        y = np.where(conv[:, None], y, y2)
        if not (conv | conv2).all():
            raise ConvergenceError(
                f"fourth-order closure failed at {int((~(conv | conv2)).sum())} node(s)"
            )
    return y


def _continuation_start(qc: np.ndarray, mask: np.ndarray, y_cur: np.ndarray) -> np.ndarray:
    """Adaptive continuation in t*Q from the uniform state for hard nodes.

    The segment t*Q stays strictly inside the admissible set, and the free
    coordinates are the orthogonal projection onto the shifted affine set
    (the particular solution is orthogonal to the nullspace), so carrying y
    between t-values is the natural warm start.  Each node advances with its
    own step, halved on failure and grown on success.
    """
    wk = _work()
    y0 = y_cur.copy()
    sub = np.where(mask)[0]
    qsub = qc[sub]
    ns = sub.size

    # exact start at t = 0: the uniform state minimizes the functional there
    m0 = np.broadcast_to((_EYE / 3.0).reshape(9), (ns, 9))
    xp0 = wk.rhs(m0, m0) @ wk.pinv_C.T
    y = (wk.x_uniform - xp0) @ wk.null
    t = np.zeros(ns)
    step = np.ones(ns)

    for _ in range(400):
        active = (t < 1.0 - 1e-12) & (step > 1.0 / 65536.0)
        if not active.any():
            break
        idx = np.where(active)[0]
        t_try = np.minimum(1.0, t[idx] + step[idx])
        qt = t_try[:, None] * qsub[idx]
        m1 = matrix_from_coords(qt[:, :5]) + _EYE / 3.0
        m2 = matrix_from_coords(qt[:, 5:]) + _EYE / 3.0
        m1f, m2f = m1.reshape(-1, 9), m2.reshape(-1, 9)
        xp = wk.rhs(m1f, m2f) @ wk.pinv_C.T
        a0 = wk.base_blocks(xp, m1f, m2f)
        y_new, conv, _ = _solve_free(a0, y[idx])
        ok = np.where(conv)[0]
        bad = np.where(~conv)[0]
        y[idx[ok]] = y_new[ok]
        t[idx[ok]] = t_try[ok]
        step[idx[ok]] = np.minimum(1.5 * step[idx[ok]], 1.0)
        step[idx[bad]] *= 0.5
    y0[sub] = y
    return y0


# ---------------------------------------------------------------------------
# tensors and operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClosureTensors:
    """The five diffusion tensors and the two co-deformation tensors."""

    r1: Tensor4Op
    r2: Tensor4Op
    r3: Tensor4Op
    r4: Tensor4Op
    r5: Tensor4Op
    vq1: Tensor4Op
    vq2: Tensor4Op

    def to_csv(self) -> str:
        lines = ["tensor," + ",".join(f"c{i}" for i in range(81))]
        for name in ("r1", "r2", "r3", "r4", "r5", "vq1", "vq2"):
            arr = getattr(self, name).arr.ravel()
            lines.append(name + "," + ",".join("%.17g" % v for v in arr))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class KineticOperators:
    """Assembled dissipation, co-deformation and viscous-stress operators."""

    m11: Tensor4Op
    m12: Tensor4Op
    m22: Tensor4Op
    vq1: Tensor4Op
    vq2: Tensor4Op
    p: Tensor4Op

    @property
    def n_q1(self) -> Tensor4Op:
        return self.vq1.T

    @property
    def n_q2(self) -> Tensor4Op:
        return self.vq2.T

    def m_coords(self) -> np.ndarray:
        """10x10 matrix of the dissipation operator on pair coordinates."""
        out = np.zeros((10, 10))
        out[:5, :5] = self.m11.sym_block()
        out[:5, 5:] = self.m12.sym_block()
        out[5:, :5] = self.m12.sym_block()
        out[5:, 5:] = self.m22.sym_block()
        return out

    def v_coords(self) -> np.ndarray:
        """10x9 matrix: velocity gradient (flattened) to pair coordinates."""
        return np.vstack([SYM_BASIS_FLAT @ self.vq1.arr, SYM_BASIS_FLAT @ self.vq2.arr])

    def n_coords(self) -> np.ndarray:
        return self.v_coords().T

    def p_matrix(self) -> np.ndarray:
        return self.p.arr


def _tensor_fields(x: np.ndarray, m1: np.ndarray, m2: np.ndarray, e1: float):
    """R1..R5, VQ1, VQ2 as dense arrays; batched over the leading axis."""
    w, k11, k22, k12 = _unpack(x)
    d = _EYE
    k13 = np.einsum("...ab,cd->...abcd", m1, d) - k11 - k12
    k23 = (
        np.einsum("...ab,cd->...abcd", m2, d)
        - np.einsum("...cdab->...abcd", k12)
        - k22
    )

    def centered(k, m):
        return (
            k
            - np.einsum("...ab,cd->...abcd", m, d) / 3.0
            - np.einsum("ab,...cd->...abcd", d, m) / 3.0
            + np.einsum("ab,cd->abcd", d, d) / 9.0
        )

    def four_sym(k):
        return (
            np.einsum("...ikjl->...ijkl", k)
            + np.einsum("...iljk->...ijkl", k)
            + np.einsum("...jkil->...ijkl", k)
            + np.einsum("...jlik->...ijkl", k)
        )

    def u_of(k):
        return 0.5 * (np.einsum("...ikjl->...ijkl", k) + np.einsum("...jkil->...ijkl", k))

    r1 = centered(k11, m1)
    r2 = centered(k22, m2)
    r3 = four_sym(k12)
    r4 = four_sym(k13)
    r5 = four_sym(k23)
    u12 = u_of(k12)
    u12p = 0.5 * (np.einsum("...iljk->...ijkl", k12) + np.einsum("...jlik->...ijkl", k12))
    vq1 = 2.0 * (u_of(k13) + e1 * u12 - (1.0 - e1) * u12p)
    vq2 = 2.0 * (u_of(k23) - e1 * u12 + (1.0 - e1) * u12p)
    return r1, r2, r3, r4, r5, vq1, vq2


def tensors_from_moments(ms: MomentState, e1: float = 0.5) -> ClosureTensors:
    fields = _tensor_fields(ms.master_vector()[None], ms.m1[None], ms.m2[None], e1)
    ops = [Tensor4Op.from_tensor(f[0]) for f in fields]
    return ClosureTensors(*ops)


def moments_from_density(b: ConjugatePair | np.ndarray, rule: QuadratureRule) -> MomentState:
    """All required monomial moments under the maximum entropy density."""
    bcoords = b.coords if isinstance(b, ConjugatePair) else np.asarray(b, dtype=float)
    w, _ = rule.boltzmann_weights(bcoords)
    qhat = rule.coords2.T @ w
    m1 = matrix_from_coords(qhat[:5]) + _EYE / 3.0
    m2 = matrix_from_coords(qhat[5:]) + _EYE / 3.0
    wm = (rule.w_feat.T @ w).reshape(3, 3, 3)
    k11 = _sym4((rule.k11_feat.T @ w).reshape(3, 3, 3, 3))
    k22 = _sym4((rule.k22_feat.T @ w).reshape(3, 3, 3, 3))
    k12 = (rule.k12_feat.T @ w).reshape(3, 3, 3, 3)
    k12 = 0.25 * (
        k12 + k12.transpose(1, 0, 2, 3) + k12.transpose(0, 1, 3, 2) + k12.transpose(1, 0, 3, 2)
    )
    return MomentState(0.5 * (m1 + m1.T), 0.5 * (m2 + m2.T), wm, k11, k22, k12)


def closure_maxent(q: QPair, rule: QuadratureRule, e1: float = 0.5) -> ClosureTensors:
    """Closure through the maximum entropy state matching Q."""
    b = solve_conjugate(q, rule)
    return tensors_from_moments(moments_from_density(b, rule), e1)


def closure_quasi(q: QPair, e1: float = 0.5) -> tuple[MomentState, ClosureTensors]:
    """Closure by minimizing the fourth-order log-determinant functional."""
    x, _ = _quasi_master_batch(q.coords[None])
    m1 = q.q1.to_matrix() + _EYE / 3.0
    m2 = q.q2.to_matrix() + _EYE / 3.0
    ms = MomentState.from_master(x[0], m1, m2)
    return ms, tensors_from_moments(ms, e1)


def xi4_free_hessian(q: QPair) -> np.ndarray:
    """Hessian of the fourth-order functional on the free directions at its minimizer."""
    wk = _work()
    qc = q.coords[None]
    x, y = _quasi_master_batch(qc)
    m1 = matrix_from_coords(qc[:, :5]) + _EYE / 3.0
    m2 = matrix_from_coords(qc[:, 5:]) + _EYE / 3.0
    a0 = wk.base_blocks(x - y @ wk.null.T, m1.reshape(1, 9), m2.reshape(1, 9))
    blocks = [b[0] + np.einsum("f,fab->ab", y[0], bf) for b, bf in zip(a0, wk.b_free)]
    hess = np.zeros((wk.n_free, wk.n_free))
    for bi in range(4):
        x_ = np.linalg.solve(blocks[bi], wk.b_free[bi].transpose(1, 0, 2).reshape(
            _BLOCK_SIZES[bi], -1)).reshape(_BLOCK_SIZES[bi], wk.n_free, _BLOCK_SIZES[bi])
        x_ = x_.transpose(1, 0, 2)
        hess += np.einsum("iab,jba->ij", x_, x_)
    return hess


def assemble_operators(ct: ClosureTensors, params: PhysicalParams) -> KineticOperators:
    """Dissipation/viscous operators from the closure tensors."""
    g1, g2, g3 = params.gamma1, params.gamma2, params.gamma3
    m11 = g2 * ct.r4 + g3 * ct.r3
    m12 = (-g3) * ct.r3
    m22 = g1 * ct.r5 + g3 * ct.r3
    p = params.zeta * (
        params.i22 * ct.r1 + params.i11 * ct.r2 + params.e1 * params.i11 * ct.r3
    )
    return KineticOperators(m11, m12, m22, ct.vq1, ct.vq2, p)


# ---------------------------------------------------------------------------
# batched field closure for the dynamics solver
# ---------------------------------------------------------------------------


@dataclass
class ClosureFieldCache:
    """Warm-start store for repeated field closures (one per simulation)."""

    y: np.ndarray | None = None
    hinv: np.ndarray | None = None


def closure_field_quasi(
    qc: np.ndarray,
    params: PhysicalParams,
    cache: ClosureFieldCache | None = None,
):
    """Kinetic operator fields for a batch of pairs, via the quasi closure.

    qc: (n, 10).  Returns dict with 'm' (n,10,10), 'v5' (n,10,9), 'p9' (n,9,9).
    """
    y_init = cache.y if cache is not None else None
    hinv = cache.hinv if cache is not None else None
    if y_init is not None and y_init.shape[0] != qc.shape[0]:
        y_init = None
        hinv = None
    if cache is not None:
        x, y, hinv = _quasi_master_batch(qc, y_init, hinv, want_hinv=True,
                                         tol=XI4_FIELD_TOL)
        cache.y, cache.hinv = y, hinv
    else:
        x, y = _quasi_master_batch(qc, y_init)
    n = qc.shape[0]
    m1 = matrix_from_coords(qc[:, :5]) + _EYE / 3.0
    m2 = matrix_from_coords(qc[:, 5:]) + _EYE / 3.0
    r1, r2, r3, r4, r5, vq1, vq2 = _tensor_fields(x, m1, m2, params.e1)

    ef = SYM_BASIS_FLAT

    def sym_block(r):
        return np.einsum("ka,nab,lb->nkl", ef, r.reshape(n, 9, 9), ef)

    rc3, rc4, rc5 = sym_block(r3), sym_block(r4), sym_block(r5)
    mfield = np.zeros((n, 10, 10))
    mfield[:, :5, :5] = params.gamma2 * rc4 + params.gamma3 * rc3
    mfield[:, :5, 5:] = -params.gamma3 * rc3
    mfield[:, 5:, :5] = -params.gamma3 * rc3
    mfield[:, 5:, 5:] = params.gamma1 * rc5 + params.gamma3 * rc3

    v5 = np.zeros((n, 10, 9))
    v5[:, :5, :] = np.einsum("ka,nab->nkb", ef, vq1.reshape(n, 9, 9))
    v5[:, 5:, :] = np.einsum("ka,nab->nkb", ef, vq2.reshape(n, 9, 9))

    p9 = params.zeta * (
        params.i22 * r1 + params.i11 * r2 + params.e1 * params.i11 * r3
    ).reshape(n, 9, 9)
    return {"m": mfield, "v5": v5, "p9": p9}
