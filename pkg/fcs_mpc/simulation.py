"""Closed-loop plant simulation of the charging station.

Each sampling instant: scheduled departures leave, arrivals are admitted to
free plugs of their level (FIFO queue per level), completed sessions are
dropped, the controller runs, and battery and storage states are advanced.
"""
from collections import deque
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Deque, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from fcs_mpc.models.controller import ControllerState, control_step
from fcs_mpc.utils.domain import (ChargingSession, FleetEvent, PvProfile,
                                  StorageState, effective_pv)
from fcs_mpc.utils.scenario import (ScenarioConfig, ScenarioError,
                                    build_pv_profile, validate_scenario)
from fcs_mpc.utils.utils import printer


STORAGE_TOL_KWH = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SessionLog:
    ref: float
    ref_raw: float
    p: float
    x: float
    x_next: float
    t_arr: float
    x_max: float
    p_min: float
    plug: int


@dataclass(frozen=True)
class StepLog:
    """State at t (before the update) and the decision taken at t."""
    t: float
    dt: float
    y: float
    y_next: float
    p_pv: float
    p_pv_available: float
    p_s: float
    p_g: float
    sessions: Dict[str, SessionLog]
    queued: int = 0
    objective: float = 0.
    kkt_residual: float = 0.
    fallback: bool = False

    @property
    def p_total(self) -> float:
        return float(sum(s.p for s in self.sessions.values()))

    @property
    def p_ref_total(self) -> float:
        return float(sum(s.ref for s in self.sessions.values()))


@dataclass
class World:
    scenario: ScenarioConfig
    pv: PvProfile
    y: float
    t: float = 0.
    state: ControllerState = field(default_factory=ControllerState)
    plugs: List[Optional[ChargingSession]] = field(default_factory=list)
    pending: Deque[FleetEvent] = field(default_factory=deque)
    queues: Dict[float, Deque[FleetEvent]] = field(default_factory=dict)
    departures: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig,
                      pv: Optional[PvProfile] = None) -> "World":
        fleet = sorted(scenario.fleet, key=lambda ev: ev.t_arr)
        return cls(scenario=scenario,
                   pv=build_pv_profile(scenario) if pv is None else pv,
                   y=scenario.y0,
                   plugs=[None] * scenario.station.n_plugs,
                   pending=deque(fleet),
                   queues={level: deque() for level in scenario.station.plugs},
                   departures={ev.ev_id: ev.t_depart for ev in fleet
                               if ev.t_depart is not None})

    @property
    def sessions(self) -> List[ChargingSession]:
        return [s for s in self.plugs if s is not None]

    @property
    def n_queued(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def _departed(self, ev_id: str, t: float) -> bool:
        t_depart = self.departures.get(ev_id)
        return t_depart is not None and t_depart <= t

    def _admit(self, t: float):
        while self.pending and self.pending[0].t_arr <= t:
            ev = self.pending.popleft()
            self.queues[ev.plug_level].append(ev)
        for q in self.queues.values():
            # A vehicle may leave while still waiting
            for ev in [ev for ev in q if self._departed(ev.ev_id, t)]:
                q.remove(ev)
        for i, level in enumerate(self.scenario.station.plugs):
            q = self.queues[level]
            if self.plugs[i] is None and q:
                self.plugs[i] = q.popleft().session(i)


def step(world: World, t: float) -> StepLog:
    """Advance the world by one sampling period starting at t.

    Args:
        world (World): Mutable simulation state, its clock must equal t
        t (float): Current time in seconds

    Returns:
        row (StepLog)
    """
    assert abs(world.t - t) < 1e-9, f"World is at t={world.t}, not {t}"
    scenario = world.scenario
    T = scenario.weights.T

    for i, s in enumerate(world.plugs):
        if s is not None and world._departed(s.id, t):
            world.plugs[i] = None
    world._admit(t)
    for i, s in enumerate(world.plugs):
        if s is not None and s.is_complete:
            world.plugs[i] = None

    sessions = world.sessions
    pv_now = effective_pv(world.pv, t)
    decision = control_step(sessions, scenario.station, scenario.storage,
                            StorageState(world.y), pv_now, scenario.weights,
                            scenario.mode, world.state, t, scenario.flags)

    logs = {}
    for i, s in enumerate(world.plugs):
        if s is None:
            continue
        p = decision.p.get(s.id, 0.)
        nxt = s.charged(p, T)
        logs[s.id] = SessionLog(ref=decision.p_ref.get(s.id, 0.),
                                ref_raw=decision.p_ref_raw.get(s.id, 0.),
                                p=p, x=s.x, x_next=nxt.x, t_arr=s.t_arr,
                                x_max=s.x_max, p_min=s.p_min, plug=i)
        world.plugs[i] = nxt

    y_max = scenario.storage.y_max
    y_next = decision.y_next
    if y_next < -STORAGE_TOL_KWH or y_next > y_max + STORAGE_TOL_KWH:
        raise SimulationError(f"Storage state {y_next!r} kWh outside "
                              f"[0, {y_max}] at t={t} s")

    row = StepLog(t=t, dt=T, y=world.y, y_next=y_next, p_pv=decision.pv_used,
                  p_pv_available=pv_now, p_s=decision.p_s, p_g=decision.p_g,
                  sessions=logs, queued=world.n_queued,
                  objective=decision.objective,
                  kkt_residual=decision.kkt_residual,
                  fallback=decision.fallback)

    world.y = float(np.clip(y_next, 0., y_max))
    world.state = world.state.advance(decision)
    world.t = t + T
    return row


def run(scenario: ScenarioConfig, verbose: bool = False) -> List[StepLog]:
    """Simulate a scenario over its horizon.

    Returns:
        logs (list): horizon / T + 1 rows
    """
    errors = validate_scenario(scenario)
    if errors:
        raise ScenarioError(errors)

    world = World.from_scenario(scenario)
    T = scenario.weights.T
    printer(f"Simulating '{scenario.name}' ({scenario.mode.value}, "
            f"{len(scenario.fleet)} vehicles, {scenario.n_steps} steps)",
            verbose)

    logs = []
    for k in tqdm(range(scenario.n_steps), disable=not verbose):
        logs.append(step(world, k * T))
    return logs


def run_many(scenarios: Sequence[ScenarioConfig],
             workers: Optional[int] = None) -> List[List[StepLog]]:
    """Run independent scenarios in a process pool. Results keep the input
    order."""
    if workers == 1 or len(scenarios) <= 1:
        return [run(s) for s in scenarios]
    with Pool(processes=workers) as pool:
        return pool.starmap(run, [(s, False) for s in scenarios])
