#!/usr/bin/env python3
"""Find the bulk minimizer for a coefficient set and print its Hessian spectrum."""

import argparse

import numpy as np

from biaxhydro.entropy import EntropyKind
from biaxhydro.equilibrium import (
    BulkCoefficients,
    bulk_energy,
    find_minimizer,
    hessian_spectrum,
)

NU = 5.0 / 9.0


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--c02", type=float, default=-35 * NU)
    ap.add_argument("--c03", type=float, default=-20 * NU)
    ap.add_argument("--c04", type=float, default=-20 * NU)
    ap.add_argument("--nu", type=float, default=NU)
    ap.add_argument("--starts", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    bulk = BulkCoefficients(args.c02, args.c03, args.c04, EntropyKind.quasi(args.nu))
    form = find_minimizer(bulk, starts=args.starts, seed=args.seed)
    spec = hessian_spectrum(form, bulk)
    print(f"minimizer (s1, b1, s2, b2) = ({form.s1:.6f}, {form.b1:.6f}, "
          f"{form.s2:.6f}, {form.b2:.6f})")
    print(f"energy              = {bulk_energy(form.as_qpair(), bulk):.10f}")
    print(f"kernel dimension    = {spec.kernel_dim}")
    print(f"tangent angle       = {spec.xi_angle:.3e} rad")
    print(f"smallest positive   = {spec.smallest_positive:.6f}")
    print("eigenvalues:")
    print("  " + "  ".join(f"{v:10.4f}" for v in spec.eigenvalues))
    np.set_printoptions(precision=4, suppress=True)


if __name__ == "__main__":
    main()
