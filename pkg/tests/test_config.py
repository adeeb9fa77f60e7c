"""Strict config parsing, validation and round-trips."""

import numpy as np
import pytest

from biaxhydro.config import (
    ConfigError,
    ElasticCoefficients,
    GridSpec,
    SimConfig,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
)


def test_defaults():
    cfg = SimConfig()
    assert cfg.epsilon == 0.1
    assert cfg.dt_effective == pytest.approx(0.01)
    assert cfg.bulk.kind.tag == "quasi"
    assert cfg.bulk.kind.nu == pytest.approx(5.0 / 9.0)
    assert cfg.params.gamma1 == 1.0 and cfg.params.eta == 1.0
    assert cfg.params.e1 == pytest.approx(0.5)


def test_grid_validation():
    with pytest.raises(ConfigError):
        GridSpec(nx=48)
    with pytest.raises(ConfigError):
        GridSpec(lx=-1.0)
    g = GridSpec(nx=8, ny=16)
    assert g.n_nodes == 128
    assert g.cell_area == pytest.approx(g.lx * g.ly / 128)


def test_elastic_pd_conditions():
    with pytest.raises(ConfigError, match="c24"):
        ElasticCoefficients(c24=0.02)
    with pytest.raises(ConfigError, match="c210"):
        ElasticCoefficients(c210=0.02)
    with pytest.raises(ConfigError, match="positive"):
        ElasticCoefficients(c22=-0.1)
    e = ElasticCoefficients()
    assert np.linalg.eigvalsh(e.d1)[0] > 0
    assert np.linalg.eigvalsh(e.d2)[0] > 0


def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        SimConfig(dt=-0.1)
    with pytest.raises(ConfigError):
        SimConfig(closure_route="bogus")
    with pytest.raises(ConfigError):
        SimConfig(integrator="bogus")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="grid.bogus"):
        config_from_dict({"grid": {"bogus": 2}})


def test_type_errors_named():
    with pytest.raises(ConfigError, match="epsilon"):
        config_from_dict({"epsilon": "big"})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": 1.5})


def test_round_trip():
    cfg = config_from_dict({
        "epsilon": 0.05, "seed": 7,
        "grid": {"nx": 16, "ny": 16},
        "params": {"gamma1": 0.2, "eta": 0.05},
        "bulk": {"c02": -10.0, "nu": 0.5},
        "elastic": {"c22": 0.03},
    })
    assert cfg.grid.nx == 16
    assert cfg.params.gamma1 == 0.2
    assert cfg.bulk.c02 == -10.0
    d = config_to_dict(cfg)
    cfg2 = config_from_dict(d)
    assert config_to_dict(cfg2) == d
    assert dump_config(cfg2) == dump_config(cfg.with_updates(dt=cfg.dt_effective))


def test_load_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('epsilon = 0.2\n[grid]\nnx = 8\nny = 8\n')
    cfg = load_config(str(p))
    assert cfg.epsilon == 0.2 and cfg.grid.nx == 8
    bad = tmp_path / "bad.toml"
    bad.write_text("epsilon = = 1\n")
    with pytest.raises(ConfigError, match="malformed TOML"):
        load_config(str(bad))


def test_entropy_selection():
    cfg = config_from_dict({"bulk": {"entropy": "original"}})
    assert cfg.bulk.kind.tag == "original"
    with pytest.raises(ConfigError):
        config_from_dict({"bulk": {"entropy": "bogus"}})
