"""Fourth-moment closures and the assembled kinetic operators."""

import numpy as np
import pytest

from biaxhydro.closure import (
    ClosureFieldCache,
    PhysicalParams,
    assemble_operators,
    closure_field_quasi,
    closure_maxent,
    closure_quasi,
    moments_from_density,
    xi4_free_hessian,
)
from biaxhydro.tensor_core import (
    Frame,
    QPair,
    SYM_BASIS_FLAT,
    rotation_rep10,
)

from conftest import random_interior_pairs


def test_physical_params():
    p = PhysicalParams()
    assert p.e1 == pytest.approx(0.5)
    assert p.e1 + p.e2 == pytest.approx(1.0)
    p2 = PhysicalParams(i11=1.0, i22=3.0)
    assert p2.e1 == pytest.approx(0.75)
    with pytest.raises(ValueError):
        PhysicalParams(gamma1=0.0)


def test_uniform_closures_agree(rule20):
    """At Q = 0 the maximum entropy state is Haar; both routes coincide."""
    ms_uniform = moments_from_density(np.zeros(10), rule20)
    ms_quasi, _ = closure_quasi(QPair.zero())
    for name in ("k11", "k22", "k12", "w"):
        a = getattr(ms_uniform, name)
        b = getattr(ms_quasi, name)
        assert np.abs(a - b).max() < 1e-8, name
    ct_m = closure_maxent(QPair.zero(), rule20)
    _, ct_q = closure_quasi(QPair.zero())
    for name in ("r1", "r2", "r3", "r4", "r5", "vq1", "vq2"):
        assert np.abs(getattr(ct_m, name).arr - getattr(ct_q, name).arr).max() < 1e-8


def test_moment_state_validate(rule20):
    rng = np.random.default_rng(0)
    b = 0.6 * rng.standard_normal(10)
    ms = moments_from_density(b, rule20)
    ms.validate(tol=1e-8)


@pytest.mark.parametrize("route", ["quasi", "maxent"])
def test_operator_positivity(route, rule20):
    rng = np.random.default_rng(7)
    params = PhysicalParams()
    for c in random_interior_pairs(rng, 8):
        q = QPair.from_coords(c)
        if route == "quasi":
            _, ct = closure_quasi(q, params.e1)
        else:
            ct = closure_maxent(q, rule20, params.e1)
        for name in ("r1", "r2", "r3", "r4", "r5"):
            blk = getattr(ct, name).sym_block()
            lam = np.linalg.eigvalsh(0.5 * (blk + blk.T))
            assert lam[0] > -1e-9, f"{name} not PSD"
        ops = assemble_operators(ct, params)
        m = ops.m_coords()
        assert np.abs(m - m.T).max() < 1e-9
        assert np.linalg.eigvalsh(0.5 * (m + m.T))[0] > 1e-10
        p = ops.p.sym_block()
        assert np.linalg.eigvalsh(0.5 * (p + p.T))[0] > 1e-10
        # the co-deformation transpose relation N = V^T holds exactly
        assert np.abs(ops.n_coords() - ops.v_coords().T).max() == 0.0
        assert np.abs(ops.n_q1.arr - ops.vq1.arr.T).max() == 0.0


def test_closure_rotation_equivariance():
    rng = np.random.default_rng(11)
    c = random_interior_pairs(rng, 1)[0]
    q = QPair.from_coords(c)
    r = Frame.random(rng).mat
    q_rot = QPair.from_coords(rotation_rep10(r) @ c)
    _, ct = closure_quasi(q, 0.5)
    _, ct_rot = closure_quasi(q_rot, 0.5)
    for name in ("r1", "r2", "r3", "r4", "r5", "vq1", "vq2"):
        t = getattr(ct, name).as_tensor()
        t_rot = getattr(ct_rot, name).as_tensor()
        conj = np.einsum("ia,jb,kc,ld,abcd->ijkl", r, r, r, r, t)
        assert np.abs(t_rot - conj).max() < 1e-6, name


def test_xi4_free_hessian_pd():
    rng = np.random.default_rng(13)
    for c in random_interior_pairs(rng, 5):
        h = xi4_free_hessian(QPair.from_coords(c))
        assert np.abs(h - h.T).max() < 1e-8
        assert np.linalg.eigvalsh(0.5 * (h + h.T))[0] > 0


def test_field_closure_matches_pointwise():
    rng = np.random.default_rng(17)
    qc = random_interior_pairs(rng, 6)
    params = PhysicalParams()
    out = closure_field_quasi(qc, params)
    for i, c in enumerate(qc):
        _, ct = closure_quasi(QPair.from_coords(c), params.e1)
        ops = assemble_operators(ct, params)
        assert np.abs(out["m"][i] - ops.m_coords()).max() < 1e-5
        assert np.abs(out["v5"][i] - ops.v_coords()).max() < 1e-5
        assert np.abs(out["p9"][i] - ops.p_matrix()).max() < 1e-5


def test_field_closure_cache_warm_consistency():
    rng = np.random.default_rng(19)
    qc = random_interior_pairs(rng, 6)
    params = PhysicalParams()
    cache = ClosureFieldCache()
    cold = closure_field_quasi(qc, params, cache)
    warm = closure_field_quasi(qc, params, cache)
    for key in ("m", "v5", "p9"):
        assert np.abs(cold[key] - warm[key]).max() < 1e-6
    # cache with a mismatched node count is ignored, not an error
    other = closure_field_quasi(qc[:3], params, cache)
    assert other["m"].shape[0] == 3


def test_closure_tensors_csv():
    _, ct = closure_quasi(QPair.zero())
    txt = ct.to_csv()
    lines = txt.strip().split("\n")
    assert lines[0].startswith("tensor,c0,")
    assert len(lines) == 8
