"""Batch front-end: config loading, experiment orchestration, file emission.

Exit codes: 0 success, 1 usage error (bad flags, malformed config, missing
files), 2 numerical failure (non-convergence, domain exit, failed check).
All emitted files are deterministic for a fixed config and seed: floats are
rendered with %.17g in CSV and via repr in JSON with sorted keys.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .closure import PhysicalParams, assemble_operators, closure_quasi
from .config import (
    ConfigError,
    SimConfig,
    config_to_dict,
    load_config,
)
from .dynamics import (
    CSV_HEADER,
    FieldState,
    Simulation,
    energy_identity_residual,
    relax_homogeneous,
    write_energy_csv,
    write_snapshot,
)
from .entropy import EntropyKind
from .equilibrium import (
    BulkCoefficients,
    feasibility_margin,
    find_minimizer,
    hessian_spectrum,
    verify_assumption1,
)
from .limit_lab import epsilon_sweep, manifold_chart, prepare_initial_data
from .tensor_core import ConvergenceError, OutOfDomainError, QPair

USAGE_ERROR = 1
NUMERICAL_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def _json_dump(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_threads(n: int | None) -> int:
    """Best-effort BLAS thread control; returns the count in effect."""
    if n is None:
        env = os.environ.get("QT_THREADS")
        n = int(env) if env else None
    if n is None:
        return 0
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except Exception:
        pass
    return n


def _load(args) -> SimConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = SimConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_updates(seed=args.seed)
    return cfg


def _bulk_from(args, cfg: SimConfig) -> BulkCoefficients:
    c02 = args.c02 if args.c02 is not None else cfg.bulk.c02
    c03 = args.c03 if args.c03 is not None else cfg.bulk.c03
    c04 = args.c04 if args.c04 is not None else cfg.bulk.c04
    kind = cfg.bulk.kind
    if args.nu is not None:
        kind = EntropyKind.quasi(args.nu)
    return BulkCoefficients(c02, c03, c04, kind)


def _outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_minimize(args) -> int:
    cfg = _load(args)
    bulk = _bulk_from(args, cfg)
    form = find_minimizer(bulk, starts=args.starts, seed=cfg.seed)
    from .equilibrium import bulk_energy

    energy = bulk_energy(form.as_qpair(), bulk)
    report = {
        "coefficients": bulk.to_json(),
        "minimizer": form.to_json(),
        "energy": energy,
    }
    out = _outdir(args)
    _json_dump(report, os.path.join(out, "minimize.json"))
    print("minimize: (s1,b1,s2,b2) = (%s, %s, %s, %s)  energy = %s" % (
        _fmt(form.s1), _fmt(form.b1), _fmt(form.s2), _fmt(form.b2), _fmt(energy)))
    return 0


def _cmd_spectrum(args) -> int:
    cfg = _load(args)
    bulk = _bulk_from(args, cfg)
    form = find_minimizer(bulk, starts=args.starts, seed=cfg.seed)
    spec = hessian_spectrum(form, bulk)
    report = {
        "coefficients": bulk.to_json(),
        "minimizer": form.to_json(),
        "eigenvalues": list(spec.eigenvalues),
        "kernel_dim": spec.kernel_dim,
        "xi_angle": spec.xi_angle,
        "smallest_positive": spec.smallest_positive,
    }
    out = _outdir(args)
    _json_dump(report, os.path.join(out, "spectrum.json"))
    print("spectrum: kernel_dim = %d  smallest_positive = %s  xi_angle = %s" % (
        spec.kernel_dim, _fmt(spec.smallest_positive), _fmt(spec.xi_angle)))
    return 0


def _cmd_closure_table(args) -> int:
    cfg = _load(args)
    spacing = args.spacing
    rng = np.arange(-1.0, 1.0 + 0.5 * spacing, spacing)
    rows = []
    for s1 in rng:
        for b1 in rng:
            for s2 in rng:
                for b2 in rng:
                    sb = np.array([s1, b1, s2, b2])
                    if feasibility_margin(sb) <= cfg.delta:
                        continue
                    coords = np.zeros(10)
                    coords[0] = s1 * np.sqrt(2.0 / 3.0)
                    coords[1] = b1 * np.sqrt(2.0)
                    coords[5] = s2 * np.sqrt(2.0 / 3.0)
                    coords[6] = b2 * np.sqrt(2.0)
                    _, ct = closure_quasi(QPair.from_coords(coords), cfg.params.e1)
                    ops = assemble_operators(ct, cfg.params)
                    rows.append(np.concatenate([
                        sb, ops.m_coords().ravel(), ops.v_coords().ravel(),
                        ops.p_matrix().ravel(),
                    ]))
    out = _outdir(args)
    path = os.path.join(out, "closure_table.csv")
    header = ("s1,b1,s2,b2,"
              + ",".join(f"m{i}" for i in range(100))
              + "," + ",".join(f"v{i}" for i in range(90))
              + "," + ",".join(f"p{i}" for i in range(81)))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")
    print(f"closure-table: {len(rows)} lattice points -> {path}")
    return 0


def _cmd_relax(args) -> int:
    cfg = _load(args)
    rng = np.random.default_rng(cfg.seed)
    coords = np.zeros(10)
    for _ in range(1000):
        trial = 0.2 * rng.normal(size=10)
        from .tensor_core import domain_membership

        if domain_membership(QPair.from_coords(trial), cfg.delta):
            coords = trial
            break
    traj, times, energies = relax_homogeneous(QPair.from_coords(coords), cfg)
    out = _outdir(args)
    path = os.path.join(out, "relax.csv")
    with open(path, "w") as fh:
        fh.write("time,energy\n")
        for t, e in zip(times, energies):
            fh.write(f"{_fmt(t)},{_fmt(e)}\n")
    _json_dump({"final": list(traj[-1].coords), "energy": energies[-1]},
               os.path.join(out, "relax_final.json"))
    print("relax: %d steps, final energy %s" % (len(times) - 1, _fmt(energies[-1])))
    return 0


def _initial_state(cfg: SimConfig, sim: Simulation, amplitude: float):
    chart = manifold_chart(cfg.bulk)
    state, _, _ = prepare_initial_data(cfg, chart, sim.grid, amplitude=amplitude)
    return state


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = Simulation(cfg)
    state = _initial_state(cfg, sim, args.amplitude)
    out = _outdir(args)
    reports = [sim.energy_report(state)]
    n_steps = int(round(cfg.t_end / cfg.dt_effective))
    for i in range(n_steps):
        state = sim.step(state)
        reports.append(sim.energy_report(state))
        if cfg.save_every and (i + 1) % cfg.save_every == 0:
            write_snapshot(os.path.join(out, f"snap_{i + 1:06d}.qt2d"), state)
    write_energy_csv(os.path.join(out, "energy.csv"), reports)
    write_snapshot(os.path.join(out, "final.qt2d"), state)
    residual = energy_identity_residual(reports, work=sim.dissipated)
    mono = all(b.total <= a.total + 1e-9 * cfg.dt_effective
               for a, b in zip(reports, reports[1:]))
    _json_dump({
        "config": config_to_dict(cfg),
        "steps": n_steps,
        "final_total": reports[-1].total,
        "energy_identity_residual": residual,
        "monotone": mono,
    }, os.path.join(out, "simulate.json"))
    print("simulate: %d steps, total %s -> %s, residual %s" % (
        n_steps, _fmt(reports[0].total), _fmt(reports[-1].total), _fmt(residual)))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    eps_list = [float(tok) for tok in args.eps.split(",")] if args.eps else [0.1, 0.05, 0.025]
    res_window = None
    if getattr(args, "res_window", None):
        t0, t1 = (float(tok) for tok in args.res_window.split(","))
        res_window = (t0, t1)
    report = epsilon_sweep(cfg, eps_list, amplitude=args.amplitude,
                           res_window=res_window)
    out = _outdir(args)
    _json_dump(report, os.path.join(out, "sweep.json"))
    failed = any(r["failed"] for r in report["runs"])
    order = report["fit_order"]
    print("sweep: fit_order = %s  fit_r2 = %s%s" % (
        "n/a" if order is None else _fmt(order),
        "n/a" if report["fit_r2"] is None else _fmt(report["fit_r2"]),
        "  (failures)" if failed else ""))
    return NUMERICAL_FAILURE if failed or order is None else 0


def _cmd_verify(args) -> int:
    cfg = _load(args)
    bulk = _bulk_from(args, cfg)
    report = verify_assumption1(bulk, starts=args.starts, seed=cfg.seed)
    out = _outdir(args)
    _json_dump(report, os.path.join(out, "verify.json"))
    print("verify: kernel_dim = %d  xi_angle = %s  pass = %s" % (
        report["kernel_dim"], _fmt(report["xi_angle"]), report["pass"]))
    return 0 if report["pass"] else NUMERICAL_FAILURE


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, coeffs: bool = False):
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--out", default=None, help="output directory (default .)")
    p.add_argument("--seed", type=int, default=None, help="PRNG seed override")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (env QT_THREADS as fallback)")
    p.add_argument("--format", choices=("json", "csv"), default="json",
                   help="preferred report format where applicable")
    if coeffs:
        p.add_argument("--c02", type=float, default=None)
        p.add_argument("--c03", type=float, default=None)
        p.add_argument("--c04", type=float, default=None)
        p.add_argument("--nu", type=float, default=None)
        p.add_argument("--starts", type=int, default=12)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biaxhydro",
                     description="Two-tensor hydrodynamics workbench")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("minimize", help="bulk-energy minimization")
    _add_common(p, coeffs=True)
    p.set_defaults(func=_cmd_minimize)

    p = sub.add_parser("spectrum", help="Hessian spectrum at the minimizer")
    _add_common(p, coeffs=True)
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("closure-table", help="closure tensors on a scalar lattice")
    _add_common(p)
    p.add_argument("--spacing", type=float, default=0.2)
    p.set_defaults(func=_cmd_closure_table)

    p = sub.add_parser("relax", help="homogeneous relaxation")
    _add_common(p)
    p.set_defaults(func=_cmd_relax)

    p = sub.add_parser("simulate", help="2D periodic simulation")
    _add_common(p)
    p.add_argument("--amplitude", type=float, default=0.05,
                   help="frame-modulation amplitude of the initial data")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="epsilon sweep with convergence fit")
    _add_common(p)
    p.add_argument("--eps", default=None, help="comma-separated epsilon list")
    p.add_argument("--amplitude", type=float, default=0.05)
    p.add_argument("--res-window", default=None,
                   help="t0,t1 window for the frame-residual L2 "
                        "accumulation (default: whole run)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify", help="minimizer-manifold structure check")
    _add_common(p, coeffs=True)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"biaxhydro: config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ConvergenceError, OutOfDomainError) as exc:
        print(f"biaxhydro: numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_FAILURE


if __name__ == "__main__":
    sys.exit(main())
