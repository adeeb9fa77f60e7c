"""Shared fixtures: quadrature rules, canonical coefficients, random points."""

import numpy as np
import pytest

from biaxhydro.entropy import EntropyKind
from biaxhydro.equilibrium import BulkCoefficients, find_minimizer
from biaxhydro.so3_quad import build_rule
from biaxhydro.tensor_core import QPair, domain_membership

NU = 5.0 / 9.0


@pytest.fixture(scope="session")
def rule20():
    return build_rule(20, 20)


@pytest.fixture(scope="session")
def rule24():
    return build_rule(24, 24)


@pytest.fixture(scope="session")
def bulk_canonical():
    return BulkCoefficients(-35 * NU, -20 * NU, -20 * NU, EntropyKind.quasi(NU))


@pytest.fixture(scope="session")
def form_canonical(bulk_canonical):
    return find_minimizer(bulk_canonical, starts=12, seed=0)


def random_interior_pairs(rng, n, scale=0.15, delta=5e-3):
    """n tensor pairs strictly inside the physical domain."""
    out = []
    while len(out) < n:
        c = scale * rng.standard_normal(10)
        if domain_membership(QPair.from_coords(c), delta):
            out.append(c)
    return np.array(out)
