import os

import pytest

from fcs_mpc.models.controller import ControlFlags, ControlMode
from fcs_mpc.simulation import run
from fcs_mpc.utils.domain import (ControllerWeights, FleetEvent,
                                  StationConfig, StorageConfig)
from fcs_mpc.utils.scenario import PvSource, ScenarioConfig, load_scenario


SCENARIO_DIR = os.path.join(os.path.dirname(os.path.dirname(
    os.path.abspath(__file__))), "scenarios")


def scenario_path(name: str) -> str:
    return os.path.join(SCENARIO_DIR, f"{name}.cfg")


def make_scenario(fleet=(), mode=ControlMode.STANDALONE, plugs=(50.,),
                  p_cs_max=120., y_max=20., p_s_max=150., eps_s=0.1,
                  y_ref=10., y0=0., pv_level=0., horizon=1800., alpha=10.,
                  beta=5e6, gamma=3e7, delta=10., e=3., T=60.,
                  flags=ControlFlags()) -> ScenarioConfig:
    """Small in-memory scenario with a constant PV source"""
    return ScenarioConfig(
        name="test",
        station=StationConfig(p_cs_max=p_cs_max, plugs=plugs),
        storage=StorageConfig(y_max=y_max, p_s_max=p_s_max, eps_s=eps_s,
                              y_ref=y_ref),
        y0=y0,
        pv=PvSource(kind="constant", nominal=120., eps_pv=0.15,
                    level_kw=pv_level),
        fleet=tuple(fleet),
        weights=ControllerWeights(alpha=alpha, beta=beta, gamma=gamma,
                                  delta=delta, e=e, T=T),
        mode=mode,
        horizon=horizon,
        flags=flags)


def ev(ev_id="a", t_arr=0., plug_level=50., x0=0., x_max=10., p_min=5.,
       t_depart=None) -> FleetEvent:
    return FleetEvent(ev_id=ev_id, t_arr=t_arr, plug_level=plug_level, x0=x0,
                      x_max=x_max, p_min=p_min, t_depart=t_depart)


@pytest.fixture(scope="session")
def med16():
    return load_scenario(scenario_path("med16"))


@pytest.fixture(scope="session")
def med16_logs(med16):
    return run(med16)
