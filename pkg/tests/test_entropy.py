"""Entropy terms: log-determinant quasi-entropy and the maximum entropy state."""

import numpy as np
import pytest

from biaxhydro.entropy import (
    EntropyKind,
    entropy_grad,
    entropy_hess,
    entropy_value,
    f_orig,
    moment_coords,
    orig_hessian,
    solve_conjugate,
    xi2,
    xi2_grad,
    xi2_hess,
)
from biaxhydro.tensor_core import OutOfDomainError, QPair

from conftest import random_interior_pairs


def _fd_grad(f, c, h=1e-6):
    g = np.zeros_like(c)
    for i in range(c.size):
        e = np.zeros_like(c)
        e[i] = h
        g[i] = (f(c + e) - f(c - e)) / (2 * h)
    return g


def test_xi2_at_zero():
    # -3 ln det(I/3) = 9 ln 3
    assert xi2(QPair.zero()) == pytest.approx(9.0 * np.log(3.0), rel=1e-14)


def test_xi2_out_of_domain():
    c = np.zeros(10)
    c[0] = -1.0
    with pytest.raises(OutOfDomainError):
        xi2(QPair.from_coords(c))
    with pytest.raises(OutOfDomainError):
        xi2_grad(QPair.from_coords(c))


def test_xi2_grad_and_hess_fd():
    rng = np.random.default_rng(1)
    for c in random_interior_pairs(rng, 5):
        g = xi2_grad(QPair.from_coords(c)).coords
        g_fd = _fd_grad(lambda x: xi2(QPair.from_coords(x)), c)
        assert np.abs(g - g_fd).max() < 1e-7 * max(1.0, np.abs(g).max())
        h = xi2_hess(QPair.from_coords(c))
        assert np.abs(h - h.T).max() < 1e-10
        for i in range(10):
            e = np.zeros(10)
            e[i] = 1e-6
            col = (xi2_grad(QPair.from_coords(c + e)).coords
                   - xi2_grad(QPair.from_coords(c - e)).coords) / 2e-6
            assert np.abs(h[:, i] - col).max() < 1e-5 * max(1.0, np.abs(h).max())


def test_xi2_hess_positive_definite():
    rng = np.random.default_rng(2)
    for c in random_interior_pairs(rng, 20):
        lam = np.linalg.eigvalsh(xi2_hess(QPair.from_coords(c)))
        assert lam[0] > 0


def test_conjugate_roundtrip(rule20):
    rng = np.random.default_rng(3)
    for _ in range(10):
        b = rng.uniform(-1, 1, 10)
        b *= min(1.0, 3.0 / np.linalg.norm(b))
        q = moment_coords(b, rule20)
        rec = solve_conjugate(QPair.from_coords(q), rule20)
        assert np.abs(rec.coords - b).max() < 1e-8


def test_f_orig_zero_and_gradient(rule20):
    assert abs(f_orig(QPair.zero(), rule20)) < 1e-12
    rng = np.random.default_rng(4)
    b = rng.uniform(-1, 1, 10)
    q = moment_coords(b, rule20)
    # dF/dQ = B
    g_fd = _fd_grad(lambda x: f_orig(QPair.from_coords(x), rule20), q, h=1e-5)
    assert np.abs(g_fd - b).max() < 1e-6 * max(1.0, np.abs(b).max())


def test_orig_hessian_is_inverse_covariance(rule20):
    rng = np.random.default_rng(5)
    b = 0.5 * rng.standard_normal(10)
    q = moment_coords(b, rule20)
    h = orig_hessian(QPair.from_coords(q), rule20)
    # Hessian of B.Q - lnZ in Q is dB/dQ = cov^{-1}; check against FD of B(Q)
    for i in (0, 3, 7):
        e = np.zeros(10)
        e[i] = 1e-6
        col = (solve_conjugate(QPair.from_coords(q + e), rule20).coords
               - solve_conjugate(QPair.from_coords(q - e), rule20).coords) / 2e-6
        assert np.abs(h[:, i] - col).max() < 1e-4 * max(1.0, np.abs(h).max())


def test_entropy_kind_dispatch(rule20):
    q = QPair.from_coords(0.1 * np.ones(10))
    kq = EntropyKind.quasi(0.7)
    assert entropy_value(q, kq) == pytest.approx(0.7 * xi2(q), rel=1e-14)
    assert np.abs(entropy_grad(q, kq).coords - 0.7 * xi2_grad(q).coords).max() < 1e-14
    assert np.abs(entropy_hess(q, kq) - 0.7 * xi2_hess(q)).max() < 1e-14
    ko = EntropyKind.original()
    with pytest.raises(ValueError):
        entropy_value(q, ko)
    b = entropy_grad(q, ko, rule20).coords
    assert np.abs(moment_coords(b, rule20) - q.coords).max() < 1e-9


def test_entropy_kind_validation():
    with pytest.raises(ValueError):
        EntropyKind("bogus")
    with pytest.raises(ValueError):
        EntropyKind.quasi(-1.0)
