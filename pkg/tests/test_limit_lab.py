"""Manifold projection, rotated operators and the small-parameter diagnostics."""

import numpy as np
import pytest

from biaxhydro.closure import PhysicalParams
from biaxhydro.config import GridSpec, SimConfig
from biaxhydro.dynamics import SpectralGrid
from biaxhydro.entropy import EntropyKind
from biaxhydro.equilibrium import BulkCoefficients
from biaxhydro.limit_lab import (
    fit_order,
    manifold_chart,
    prepare_initial_data,
    project_field,
    project_to_manifold,
    remainder_energy,
    rep10_generator,
    rotation_rep10_batch,
)
from biaxhydro.tensor_core import Frame, QPair, rotation_rep10

from conftest import NU


@pytest.fixture(scope="module")
def chart(bulk_canonical):
    return manifold_chart(bulk_canonical)


def test_chart_structure(chart):
    kb = chart.kernel_basis
    assert kb.shape == (10, 3)
    assert np.abs(kb.T @ kb - np.eye(3)).max() < 1e-12
    # Hessian annihilates the tangents; pseudo-inverse annihilates the kernel
    assert np.abs(chart.h0 @ chart.xi).max() < 1e-7
    assert np.abs(chart.h0_pinv @ kb).max() < 1e-7
    # pseudo-inverse inverts on the complement
    v = np.ones(10)
    v -= kb @ (kb.T @ v)
    assert np.abs(chart.h0_pinv @ (chart.h0 @ v) - v).max() < 1e-7


def test_rotation_rep_batch_consistency():
    rng = np.random.default_rng(0)
    r = np.stack([Frame.random(rng).mat for _ in range(4)])
    rep = rotation_rep10_batch(r)
    for i in range(4):
        assert np.abs(rep[i] - rotation_rep10(r[i])).max() < 1e-13
        assert np.abs(rep[i] @ rep[i].T - np.eye(10)).max() < 1e-12


def test_rep10_generator_is_derivative():
    h = 1e-6
    for axis in range(3):
        omega = np.zeros(3)
        omega[axis] = h
        from biaxhydro.limit_lab import _rodrigues
        rp = rotation_rep10_batch(_rodrigues(omega))
        rm = rotation_rep10_batch(_rodrigues(-omega))
        fd = (rp - rm) / (2 * h)
        assert np.abs(fd - rep10_generator(axis)).max() < 1e-8


def test_project_recovers_rotated_points(chart):
    rng = np.random.default_rng(1)
    r = np.stack([Frame.random(rng).mat for _ in range(16)])
    q = rotation_rep10_batch(r) @ chart.q0
    frames, q0f, dist, conv = project_field(q, chart)
    assert conv.all()
    assert dist.max() < 1e-9
    assert np.abs(q0f - q).max() < 1e-9


def test_project_perturbed_point(chart):
    rng = np.random.default_rng(2)
    r = Frame.random(rng).mat
    base = rotation_rep10(r) @ chart.q0
    # perturb orthogonally to the rotated tangent space
    rep = rotation_rep10(r)
    xi_rot = rep @ chart.xi
    pert = rng.standard_normal(10) * 0.01
    pert -= xi_rot @ np.linalg.solve(xi_rot.T @ xi_rot, xi_rot.T @ pert)
    proj = project_to_manifold(QPair.from_coords(base + pert), chart)
    assert proj.converged
    assert proj.distance == pytest.approx(np.linalg.norm(pert), rel=1e-3)
    # stationarity: residual orthogonal to the tangents at the solution
    resid = base + pert - proj.q0.coords
    rep_sol = rotation_rep10(proj.frame.mat)
    assert np.abs((rep_sol @ chart.xi).T @ resid).max() < 1e-6


def test_fit_order_exact():
    eps = np.array([0.1, 0.05, 0.025])
    order, r2 = fit_order(eps, 3.7 * eps ** 1.13)
    assert order == pytest.approx(1.13, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_prepare_initial_data_near_manifold():
    alpha = 0.8
    bulk = BulkCoefficients(-35 * NU * alpha, -20 * NU * alpha, -20 * NU * alpha,
                            EntropyKind.quasi(NU))
    chart = manifold_chart(bulk)
    params = PhysicalParams(gamma1=0.2, gamma2=0.2, gamma3=0.2, zeta=0.05, eta=0.05)
    cfg = SimConfig(epsilon=0.1, grid=GridSpec(16, 16), bulk=bulk, params=params)
    grid = SpectralGrid(cfg.grid, cfg.elastic)
    state, frames, q0field = prepare_initial_data(cfg, chart, grid, amplitude=0.05)
    assert np.abs(state.v).max() == 0.0
    n = cfg.grid.n_nodes
    # distance to the manifold is O(epsilon), set by the transverse correction
    _, _, dist, conv = project_field(state.q.reshape(n, 10), chart)
    assert conv.all()
    assert dist.max() < 10 * cfg.epsilon
    assert dist.max() > 0  # the correction is nonzero
    # the correction is what separates the state from its projection
    dev = state.q.reshape(n, 10) - q0field.reshape(n, 10)
    assert np.abs(dev).max() < 10 * cfg.epsilon


def test_remainder_energy_quadratic_scaling(chart):
    cfg = SimConfig(epsilon=0.1, grid=GridSpec(8, 8))
    grid = SpectralGrid(cfg.grid, cfg.elastic)
    rng = np.random.default_rng(3)
    qr = 0.01 * rng.standard_normal((8, 8, 10))
    vr = 0.01 * rng.standard_normal((8, 8, 3))
    frames = np.broadcast_to(np.eye(3), (64, 3, 3)).copy()
    d1 = remainder_energy(qr, vr, cfg, chart, frames, grid)
    d2 = remainder_energy(2 * qr, 2 * vr, cfg, chart, frames, grid)
    assert d2.frak_e == pytest.approx(4 * d1.frak_e, rel=1e-10)
    assert d2.pout_l2 == pytest.approx(2 * d1.pout_l2, rel=1e-10)
    assert d2.e_norm == pytest.approx(2 * d1.e_norm, rel=1e-10)
    assert d2.f_norm == pytest.approx(2 * d1.f_norm, rel=1e-10)
