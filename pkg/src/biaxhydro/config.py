"""Configuration records and strict TOML loading for simulations.

Unknown keys are rejected with their full path so that typos in a config
file fail loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .closure import PhysicalParams
from .entropy import EntropyKind
from .equilibrium import BulkCoefficients

__all__ = [
    "ConfigError",
    "ElasticCoefficients",
    "GridSpec",
    "SimConfig",
    "load_config",
    "config_to_dict",
    "dump_config",
]

DEFAULT_NU = 5.0 / 9.0


class ConfigError(ValueError):
    """Schema violation in a configuration file."""


@dataclass(frozen=True)
class ElasticCoefficients:
    """Coefficients of the two elastic coupling matrices D1 and D2."""

    c22: float = 0.02
    c23: float = 0.02
    c24: float = 0.0
    c28: float = 0.02
    c29: float = 0.02
    c210: float = 0.0

    def __post_init__(self):
        for name in ("c22", "c23", "c28", "c29"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"elastic.{name} must be strictly positive")
        if self.c24 ** 2 >= self.c22 * self.c23:
            raise ConfigError("positive definiteness requires c24^2 < c22*c23")
        if self.c210 ** 2 >= self.c28 * self.c29:
            raise ConfigError("positive definiteness requires c210^2 < c28*c29")

    @property
    def d1(self) -> np.ndarray:
        return np.array([[self.c22, self.c24], [self.c24, self.c23]])

    @property
    def d2(self) -> np.ndarray:
        return np.array([[self.c28, self.c210], [self.c210, self.c29]])


@dataclass(frozen=True)
class GridSpec:
    """Periodic 2D grid; node counts must be powers of two."""

    nx: int = 64
    ny: int = 64
    lx: float = 2.0 * np.pi
    ly: float = 2.0 * np.pi

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if n < 2 or (n & (n - 1)) != 0:
                raise ConfigError("grid sizes must be powers of two (>= 2)")
        if self.lx <= 0 or self.ly <= 0:
            raise ConfigError("box lengths must be positive")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.lx * self.ly / (self.nx * self.ny)


@dataclass(frozen=True)
class SimConfig:
    """Everything a simulation run needs, in one record."""

    epsilon: float = 0.1
    grid: GridSpec = field(default_factory=GridSpec)
    dt: float | None = None        # None -> 0.1 * epsilon
    t_end: float = 1.0
    params: PhysicalParams = field(default_factory=PhysicalParams)
    bulk: BulkCoefficients = field(
        default_factory=lambda: BulkCoefficients(
            -35 * DEFAULT_NU, -20 * DEFAULT_NU, -20 * DEFAULT_NU,
            EntropyKind.quasi(DEFAULT_NU),
        )
    )
    elastic: ElasticCoefficients = field(default_factory=ElasticCoefficients)
    closure_route: str = "quasi"
    integrator: str = "explicit_rk4"
    delta: float = 1e-3
    seed: int = 0
    n_beta: int = 20
    n_torus: int = 20
    save_every: int = 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.t_end <= 0:
            raise ConfigError("t_end must be positive")
        if self.closure_route not in ("maxent", "quasi"):
            raise ConfigError("closure_route must be 'maxent' or 'quasi'")
        if self.integrator not in ("explicit_rk4", "imex"):
            raise ConfigError("integrator must be 'explicit_rk4' or 'imex'")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")

    @property
    def dt_effective(self) -> float:
        return self.dt if self.dt is not None else 0.1 * self.epsilon

    def with_updates(self, **kwargs) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# strict parsing
# ---------------------------------------------------------------------------


def _take(table: dict, path: str, allowed: dict):
    """Pop known keys (with type coercion); reject leftovers by path."""
    out = {}
    for key, kind in allowed.items():
        if key in table:
            val = table.pop(key)
            if kind is float:
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{path}{key}: expected a number")
                val = float(val)
            elif kind is int:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ConfigError(f"{path}{key}: expected an integer")
            elif kind is str and not isinstance(val, str):
                raise ConfigError(f"{path}{key}: expected a string")
            out[key] = val
    if table:
        stray = sorted(table)[0]
        raise ConfigError(f"unknown key '{path}{stray}'")
    return out


def config_from_dict(raw: dict) -> SimConfig:
    raw = dict(raw)
    sections = {}
    for name in ("grid", "params", "bulk", "elastic"):
        sub = raw.pop(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"'{name}' must be a table")
        sections[name] = dict(sub)

    top = _take(raw, "", {
        "epsilon": float, "dt": float, "t_end": float,
        "closure_route": str, "integrator": str, "delta": float,
        "seed": int, "n_beta": int, "n_torus": int, "save_every": int,
    })

    grid_kw = _take(sections["grid"], "grid.", {
        "nx": int, "ny": int, "lx": float, "ly": float,
    })
    params_kw = _take(sections["params"], "params.", {
        k: float for k in
        ("gamma1", "gamma2", "gamma3", "zeta", "i11", "i22", "i33", "eta")
    })
    bulk_kw = _take(sections["bulk"], "bulk.", {
        "c02": float, "c03": float, "c04": float, "entropy": str, "nu": float,
    })
    elastic_kw = _take(sections["elastic"], "elastic.", {
        k: float for k in ("c22", "c23", "c24", "c28", "c29", "c210")
    })

    entropy_tag = bulk_kw.pop("entropy", "quasi")
    nu = bulk_kw.pop("nu", DEFAULT_NU)
    if entropy_tag == "quasi":
        kind = EntropyKind.quasi(nu)
    elif entropy_tag == "original":
        kind = EntropyKind.original()
    else:
        raise ConfigError("bulk.entropy must be 'quasi' or 'original'")
    bulk = BulkCoefficients(
        bulk_kw.get("c02", -35 * DEFAULT_NU),
        bulk_kw.get("c03", -20 * DEFAULT_NU),
        bulk_kw.get("c04", -20 * DEFAULT_NU),
        kind,
    )

    try:
        return SimConfig(
            grid=GridSpec(**grid_kw),
            params=PhysicalParams(**params_kw),
            bulk=bulk,
            elastic=ElasticCoefficients(**elastic_kw),
            **top,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> SimConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: SimConfig) -> dict:
    """Normalized plain-dict form (round-trips through config_from_dict)."""
    return {
        "epsilon": cfg.epsilon,
        "dt": cfg.dt_effective,
        "t_end": cfg.t_end,
        "closure_route": cfg.closure_route,
        "integrator": cfg.integrator,
        "delta": cfg.delta,
        "seed": cfg.seed,
        "n_beta": cfg.n_beta,
        "n_torus": cfg.n_torus,
        "save_every": cfg.save_every,
        "grid": {"nx": cfg.grid.nx, "ny": cfg.grid.ny,
                 "lx": cfg.grid.lx, "ly": cfg.grid.ly},
        "params": {k: getattr(cfg.params, k) for k in
                   ("gamma1", "gamma2", "gamma3", "zeta",
                    "i11", "i22", "i33", "eta")},
        "bulk": {"c02": cfg.bulk.c02, "c03": cfg.bulk.c03, "c04": cfg.bulk.c04,
                 "entropy": cfg.bulk.kind.tag, "nu": cfg.bulk.kind.nu},
        "elastic": {k: getattr(cfg.elastic, k) for k in
                    ("c22", "c23", "c24", "c28", "c29", "c210")},
    }


def dump_config(cfg: SimConfig) -> str:
    """Deterministic JSON rendering of the normalized config."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
