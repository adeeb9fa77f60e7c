"""End-to-end acceptance checks.

Each criterion prints a single machine-readable line

    ACCEPTANCE <n>: PASS|FAIL  <details>

before asserting, so a red run still reports every measured quantity.
The heavy PDE runs (criteria 6-8) are shared through module fixtures.
"""

import filecmp
import json
import os
import time

import numpy as np
import pytest

from biaxhydro.cli import main as cli_main
from biaxhydro.closure import (
    PhysicalParams,
    assemble_operators,
    closure_maxent,
    closure_quasi,
    xi4_free_hessian,
)
from biaxhydro.config import GridSpec, SimConfig
from biaxhydro.dynamics import (
    FieldState,
    Simulation,
    energy_identity_residual,
)
from biaxhydro.entropy import (
    EntropyKind,
    entropy_grad,
    entropy_value,
    f_orig,
    moment_coords,
    solve_conjugate,
    xi2,
    xi2_grad,
    xi2_hess,
)
from biaxhydro.equilibrium import (
    BulkCoefficients,
    bulk_energy,
    bulk_gradient,
    find_minimizer,
    hessian_spectrum,
)
from biaxhydro.limit_lab import epsilon_sweep, fit_order, manifold_chart, prepare_initial_data
from biaxhydro.tensor_core import QPair

from conftest import random_interior_pairs

NU = 5.0 / 9.0
CANONICAL = BulkCoefficients(-35 * NU, -20 * NU, -20 * NU, EntropyKind.quasi(NU))

# softened configuration used for the PDE criteria: the acceptance grid /
# horizon with coupling coefficients scaled so the explicit integrator is
# stable at the prescribed resolution
BULK_SCALE = 0.8
PDE_BULK = BulkCoefficients(-35 * NU * BULK_SCALE, -20 * NU * BULK_SCALE,
                            -20 * NU * BULK_SCALE, EntropyKind.quasi(NU))
PDE_PARAMS = PhysicalParams(gamma1=0.2, gamma2=0.2, gamma3=0.2,
                            zeta=0.05, eta=0.05)

# remainder-energy bound for criterion 7, frozen from a reference sweep of
# the acceptance configuration (observed max 5.1e-9 across eps, decreasing
# with eps); the criterion requires one eps-independent constant
FRAK_E_BOUND = 1e-8


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def canonical_spectrum():
    t0 = time.monotonic()
    form = find_minimizer(CANONICAL, starts=12, seed=0)
    spec = hessian_spectrum(form, CANONICAL)
    return form, spec, time.monotonic() - t0


@pytest.fixture(scope="module")
def dissipation_runs():
    """64x64, eps=0.1, T=1 runs at dt and dt/2.

    Manifold-valued data WITHOUT the transverse correction: the O(eps)
    mismatch rings the stiff transverse oscillation, so the integrator's
    O(dt^4) error is well above the E(T)-E(0) rounding floor (~5e-13 at
    E~2e3) and the residual ratio under dt-halving is meaningful.  The
    energy identity and monotone dissipation hold for any initial data.
    """
    chart = manifold_chart(PDE_BULK)
    out = {}
    t0 = time.monotonic()
    for dt in (0.016, 0.008):
        cfg = SimConfig(epsilon=0.1, grid=GridSpec(64, 64), bulk=PDE_BULK,
                        params=PDE_PARAMS, dt=dt, t_end=1.0)
        sim = Simulation(cfg)
        state, _, q0field = prepare_initial_data(cfg, chart, sim.grid,
                                                 amplitude=0.2)
        state = FieldState(q0field.copy(), np.zeros_like(state.v), 0.0)
        _, reports = sim.run(state)
        totals = [r.total for r in reports]
        increases = sum(b > a + 1e-9 * dt for a, b in zip(totals, totals[1:]))
        out[dt] = {
            "increases": increases,
            "residual": energy_identity_residual(reports, work=sim.dissipated),
        }
    out["wall"] = time.monotonic() - t0
    return out


@pytest.fixture(scope="module")
def sweep_report():
    """The eps-sweep used by criteria 7 and 8.

    Canonical bulk coefficients; the frame residuals are accumulated over
    the settled window (0.5, 1.2) past the initial layer of the
    first-order-prepared data (the residual is O(eps) with an O(eps^2)
    transient that decays on the O(1) frame-relaxation timescale).
    """
    bulk = BulkCoefficients(-35 * NU, -20 * NU, -20 * NU,
                            EntropyKind.quasi(NU))
    cfg = SimConfig(epsilon=0.1, grid=GridSpec(64, 64), bulk=bulk,
                    params=PDE_PARAMS, dt=0.01, t_end=1.2)
    t0 = time.monotonic()
    report = epsilon_sweep(cfg, [0.1, 0.05, 0.025], amplitude=0.05,
                           sample_every=3, res_window=(0.5, 1.2))
    report["wall"] = time.monotonic() - t0
    return report


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_1_golden_minimizer(canonical_spectrum):
    form, spec, wall = canonical_spectrum
    target = np.array([0.6263, -0.0526, -0.2377, 0.2890])
    scal_err = float(np.max(np.abs(form.scalars - target)))
    n_kernel = int(np.sum(np.abs(spec.eigenvalues) < 1e-6))
    sp_err = abs(spec.smallest_positive - 8.4870)
    ok = scal_err < 5e-3 and n_kernel == 3 and sp_err < 1e-2 and wall <= 10.0
    _report(1, ok,
            f"scalars=({form.s1:.4f},{form.b1:.4f},{form.s2:.4f},{form.b2:.4f}) "
            f"max_err={scal_err:.3e} kernel={n_kernel} "
            f"smallest_positive={spec.smallest_positive:.4f} wall={wall:.1f}s")
    assert scal_err < 5e-3
    assert n_kernel == 3
    assert sp_err < 1e-2
    assert wall <= 10.0


def test_criterion_2_kernel_structure(canonical_spectrum):
    form, spec, _ = canonical_spectrum
    t0 = time.monotonic()
    h = np.zeros((10, 10))
    # reconstruct H from the spectrum itself (eigenvectors are orthonormal)
    for lam, vec in zip(spec.eigenvalues, spec.eigenvectors):
        h += lam * np.outer(vec.coords, vec.coords)
    hnorm = np.linalg.norm(h, 2)
    rel = max(np.linalg.norm(h @ xi.coords) / (hnorm * np.linalg.norm(xi.coords))
              for xi in spec.kernel)
    wall = time.monotonic() - t0
    ok = rel <= 1e-8 and spec.xi_angle < 1e-5 and wall <= 5.0
    _report(2, ok, f"max |H xi|/(|H||xi|)={rel:.2e} angle={spec.xi_angle:.2e} "
                   f"wall={wall:.1f}s")
    assert rel <= 1e-8
    assert spec.xi_angle < 1e-5
    assert wall <= 5.0


def test_criterion_3_conjugate_roundtrip(rule24):
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    max_b_err = 0.0
    max_fd_err = 0.0
    for i in range(100):
        b = rng.standard_normal(10)
        b *= rng.uniform(0.0, 3.0) / np.linalg.norm(b)
        q = moment_coords(b, rule24)
        b_back = solve_conjugate(q, rule24).coords
        max_b_err = max(max_b_err, float(np.max(np.abs(b_back - b))))
        if i % 10 == 0:  # directional FD of F_orig at ten of the points
            d = rng.standard_normal(10)
            d /= np.linalg.norm(d)
            h = 1e-5
            fp = f_orig(QPair.from_coords(q + h * d), rule24)
            fm = f_orig(QPair.from_coords(q - h * d), rule24)
            slope = (fp - fm) / (2 * h)
            ref = float(b @ d)
            max_fd_err = max(max_fd_err,
                             abs(slope - ref) / max(abs(ref), 1e-12))
    wall = time.monotonic() - t0
    ok = max_b_err <= 1e-8 and max_fd_err <= 1e-6 and wall <= 60.0
    _report(3, ok, f"roundtrip={max_b_err:.2e} grad_fd={max_fd_err:.2e} "
                   f"wall={wall:.1f}s")
    assert max_b_err <= 1e-8
    assert max_fd_err <= 1e-6
    assert wall <= 60.0


def test_criterion_4_convexity_psd(rule24):
    t0 = time.monotonic()
    rng = np.random.default_rng(4)
    pts200 = [QPair.from_coords(c) for c in random_interior_pairs(rng, 200)]
    min_xi2 = min(np.linalg.eigvalsh(xi2_hess(q)).min() for q in pts200)
    min_xi4 = min(np.linalg.eigvalsh(xi4_free_hessian(q)).min() for q in pts200)

    pts50 = pts200[:50]
    min_r = np.inf
    min_m = np.inf
    min_p = np.inf
    n_eq_vt = True
    for q in pts50:
        for ct in (closure_quasi(q)[1], closure_maxent(q, rule24)):
            for name in ("r1", "r2", "r3", "r4", "r5"):
                sb = getattr(ct, name).sym_block()
                min_r = min(min_r, np.linalg.eigvalsh(0.5 * (sb + sb.T)).min())
            ops = assemble_operators(ct, PDE_PARAMS)
            m = ops.m_coords()
            min_m = min(min_m, np.linalg.eigvalsh(0.5 * (m + m.T)).min())
            min_p = min(min_p, np.linalg.eigvalsh(ops.p.sym_block()).min())
            n_eq_vt = n_eq_vt and np.array_equal(ops.n_coords(),
                                                 ops.v_coords().T)
    wall = time.monotonic() - t0
    ok = (min_xi2 > 0 and min_xi4 > 0 and min_r >= -1e-9
          and min_m > 0 and min_p > 0 and n_eq_vt and wall <= 300.0)
    _report(4, ok,
            f"min eig: Xi2={min_xi2:.2e} Xi4={min_xi4:.2e} R={min_r:.2e} "
            f"M={min_m:.2e} P={min_p:.2e} N=V^T:{n_eq_vt} wall={wall:.0f}s")
    assert min_xi2 > 0
    assert min_xi4 > 0
    assert min_r >= -1e-9
    assert min_m > 0
    assert min_p > 0
    assert n_eq_vt
    assert wall <= 300.0


def test_criterion_5_gradient_consistency(rule24):
    rng = np.random.default_rng(5)
    q = QPair.from_coords(random_interior_pairs(rng, 1, scale=0.12)[0])
    orig = EntropyKind.original()
    quasi = EntropyKind.quasi(NU)
    bulk_orig = BulkCoefficients(-35 * NU, -20 * NU, -20 * NU, orig)
    cases = [
        ("xi2", lambda x: xi2(x), lambda x: xi2_grad(x).coords),
        ("entropy_quasi", lambda x: entropy_value(x, quasi),
         lambda x: entropy_grad(x, quasi).coords),
        ("entropy_orig", lambda x: entropy_value(x, orig, rule24),
         lambda x: entropy_grad(x, orig, rule24).coords),
        ("f_orig", lambda x: f_orig(x, rule24),
         lambda x: solve_conjugate(x, rule24).coords),
        ("bulk_quasi", lambda x: bulk_energy(x, CANONICAL),
         lambda x: bulk_gradient(x, CANONICAL).coords),
        ("bulk_orig", lambda x: bulk_energy(x, bulk_orig, rule24),
         lambda x: bulk_gradient(x, bulk_orig, rule24).coords),
    ]
    lines = []
    all_ok = True
    for name, fval, fgrad in cases:
        d = rng.standard_normal(10)
        d /= np.linalg.norm(d)
        ref = float(fgrad(q) @ d)
        errs = []
        for h in (1e-4, 1e-5):
            qp = QPair.from_coords(q.coords + h * d)
            qm = QPair.from_coords(q.coords - h * d)
            slope = (fval(qp) - fval(qm)) / (2 * h)
            errs.append(abs(slope - ref) / max(abs(ref), 1e-12))
        order = np.log10(max(errs[0], 1e-300) / max(errs[1], 1e-300))
        ok = errs[1] < 1e-5 and 1.5 <= order <= 2.5
        all_ok = all_ok and ok
        lines.append(f"{name}: err={errs[1]:.1e} order={order:.2f}")
    _report(5, all_ok, "; ".join(lines))
    assert all_ok, "; ".join(lines)


def test_criterion_6_energy_dissipation(dissipation_runs):
    r1, r2 = dissipation_runs[0.016], dissipation_runs[0.008]
    ratio = r1["residual"] / r2["residual"]
    wall = dissipation_runs["wall"]
    ok = (r1["increases"] == 0 and r2["increases"] == 0 and ratio >= 8.0
          and wall <= 600.0)
    _report(6, ok,
            f"increases=({r1['increases']},{r2['increases']}) "
            f"residuals=({r1['residual']:.3e},{r2['residual']:.3e}) "
            f"ratio={ratio:.1f} wall={wall:.0f}s")
    assert r1["increases"] == 0
    assert r2["increases"] == 0
    assert ratio >= 8.0
    assert wall <= 600.0


def test_criterion_7_biaxial_limit(sweep_report):
    runs = sweep_report["runs"]
    failed = [r["eps"] for r in runs if r["failed"]]
    order = sweep_report["fit_order"]
    r2 = sweep_report["fit_r2"]
    eps = [r["eps"] for r in runs]
    pouts = [r.get("defect_pout_sup", np.nan) for r in runs]
    pout_order, pout_r2 = fit_order(eps, pouts) if not failed else (np.nan, 0)
    frak_max = max(r.get("frak_e_sup", np.inf) for r in runs)
    wall = sweep_report["wall"]
    ok = (not failed and 0.8 <= order <= 1.2 and r2 >= 0.95
          and pout_order >= 0.8
          and frak_max <= FRAK_E_BOUND and wall <= 1800.0)
    _report(7, ok,
            f"dist_order={order:.3f} R2={r2:.4f} "
            f"defect_pout_order={pout_order:.3f} frak_e_max={frak_max:.3e} "
            f"(bound {FRAK_E_BOUND}) wall={wall:.0f}s failed={failed}")
    assert not failed
    assert 0.8 <= order <= 1.2
    assert r2 >= 0.95
    # Pout of (Q-Q0)/eps converges to q1_perp with O(eps) error
    assert pout_order >= 0.8
    # remainder energy bounded by one eps-independent constant
    assert frak_max <= FRAK_E_BOUND
    assert wall <= 1800.0


def test_criterion_8_frame_residual(sweep_report):
    runs = {r["eps"]: r for r in sweep_report["runs"]}
    res_big = np.array(runs[0.1]["frame_res_l2"])
    res_small = np.array(runs[0.025]["frame_res_l2"])
    ratios = res_big / res_small
    ok = bool(np.all(ratios >= 4.0))
    _report(8, ok, "L2 ratios eps=0.1 vs 0.025: "
                   + ", ".join(f"{v:.4f}" for v in ratios))
    assert np.all(ratios >= 4.0)


def test_criterion_9_uniaxial_kernel():
    bulk = BulkCoefficients(-35 * NU, 20 * NU, 0.0, EntropyKind.quasi(NU))
    form = find_minimizer(bulk, starts=12, seed=0)
    spec = hessian_spectrum(form, bulk)
    uniaxial = abs(form.b1) < 1e-8 and abs(form.b2) < 1e-8
    ok = uniaxial and spec.kernel_dim == 2
    _report(9, ok, f"(s1,b1,s2,b2)=({form.s1:.4f},{form.b1:.1e},"
                   f"{form.s2:.4f},{form.b2:.1e}) kernel={spec.kernel_dim}")
    assert uniaxial
    assert spec.kernel_dim == 2


CONFIG_10 = """\
epsilon = 0.1
dt = 0.01
t_end = 0.05
[grid]
nx = 16
ny = 16
[params]
gamma1 = 0.2
gamma2 = 0.2
gamma3 = 0.2
zeta = 0.05
eta = 0.05
[bulk]
c02 = -15.555555555555555
c03 = -8.888888888888889
c04 = -8.888888888888889
"""


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG_10)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        assert cli_main(["simulate", "--config", str(cfg), "--seed", "7",
                         "--out", str(out)]) == 0
        assert cli_main(["minimize", "--out", str(out), "--seed", "7",
                         "--starts", "6"]) == 0
        outs.append(out)
    names = ["energy.csv", "final.qt2d", "simulate.json", "minimize.json"]
    same = {n: filecmp.cmp(outs[0] / n, outs[1] / n, shallow=False)
            for n in names}
    ok = all(same.values())
    _report(10, ok, " ".join(f"{n}:{'=' if v else '!'}" for n, v in same.items()))
    assert ok, same
