"""Haar quadrature over SO(3): exactness, invariance, density handling."""

import numpy as np
import pytest

from biaxhydro.so3_quad import QuadratureRule, average, build_rule
from biaxhydro.tensor_core import Frame, QPair, rotation_rep10


def test_rule_validation():
    with pytest.raises(ValueError):
        build_rule(1, 4)
    with pytest.raises(ValueError):
        QuadratureRule(np.eye(3)[None], np.array([2.0]))
    with pytest.raises(ValueError):
        QuadratureRule(np.eye(3)[None], np.array([-1.0, 2.0]))


def test_nodes_are_rotations(rule20):
    r = rule20.rotations
    assert np.abs(np.einsum("nij,nik->njk", r, r) - np.eye(3)).max() < 1e-12
    dets = np.linalg.det(r)
    assert np.abs(dets - 1.0).max() < 1e-12
    assert abs(rule20.weights.sum() - 1.0) < 1e-12
    assert (rule20.weights > 0).all()


def test_haar_second_moments(rule20):
    # E[m_i m_j] = delta_ij / 3 for each body axis
    for m in (rule20.m1, rule20.m2, rule20.m3):
        mm = np.einsum("n,ni,nj->ij", rule20.weights, m, m)
        assert np.abs(mm - np.eye(3) / 3.0).max() < 1e-13
    # traceless features average to zero
    assert np.abs(rule20.coords2.T @ rule20.weights).max() < 1e-13


def test_haar_fourth_moments(rule20):
    # E[m_i m_j m_k m_l] = (d_ij d_kl + d_ik d_jl + d_il d_jk) / 15
    k11 = (rule20.k11_feat.T @ rule20.weights).reshape(3, 3, 3, 3)
    d = np.eye(3)
    want = (np.einsum("ij,kl->ijkl", d, d) + np.einsum("ik,jl->ijkl", d, d)
            + np.einsum("il,jk->ijkl", d, d)) / 15.0
    assert np.abs(k11 - want).max() < 1e-13
    # cross moments of two orthonormal axes: E[m1_i m1_j m2_k m2_l]
    k12 = (rule20.k12_feat.T @ rule20.weights).reshape(3, 3, 3, 3)
    want12 = (4 * np.einsum("ij,kl->ijkl", d, d) - np.einsum("ik,jl->ijkl", d, d)
              - np.einsum("il,jk->ijkl", d, d)) / 30.0
    assert np.abs(k12 - want12).max() < 1e-13


def test_odd_moment_vanishes(rule20):
    w3 = rule20.w_feat.T @ rule20.weights
    # m1 x m2 = m3 makes <m1_i m2_j m3_k> = eps_ijk / 6; fully odd parts vanish
    arr = w3.reshape(3, 3, 3)
    assert abs(arr[0, 1, 2] - 1.0 / 6.0) < 1e-13
    assert abs(arr[0, 0, 0]) < 1e-13


def test_boltzmann_rotation_invariance(rule24):
    rng = np.random.default_rng(0)
    b = QPair.from_coords(0.8 * rng.standard_normal(10))
    r = Frame.random(rng).mat
    u = rotation_rep10(r)
    m = rule24.coords2.T @ rule24.boltzmann_weights(b.coords)[0]
    m_rot = rule24.coords2.T @ rule24.boltzmann_weights(u @ b.coords)[0]
    assert np.abs(m_rot - u @ m).max() < 1e-8


def test_boltzmann_lnz_shift_safety(rule20):
    b = np.zeros(10)
    b[0] = 400.0  # would overflow a naive exponential
    w, lnz = rule20.boltzmann_weights(b)
    assert np.isfinite(w).all() and np.isfinite(lnz)
    assert abs(w.sum() - 1.0) < 1e-12


def test_average_uniform(rule20):
    val = average(rule20, None, lambda fr: np.outer(fr.n1, fr.n1))
    assert np.abs(val - np.eye(3) / 3.0).max() < 1e-13
