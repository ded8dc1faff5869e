"""One-step MPC dispatch of charging, storage and grid power.

Decision vector z = [P_1 .. P_n, P_s, P_g]. The objective is

    alpha (y_next - y_ref)^2 + beta (P - P_ref)' A (P - P_ref)
        + gamma P_g^2 + delta (P_g - P_g_prev)^2

with y_next = y - k T P_s + T pv, subject to 0 <= y_next <= y_max,
(1 + eps_s) P_s <= p_s_max and P_g + P_s = sum(P).
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple
import warnings

import numpy as np

from fcs_mpc.models.allocator import reference_setpoints
from fcs_mpc.utils import qpcore
from fcs_mpc.utils.domain import (ChargingSession, ControlDecision,
                                  ControllerWeights, StationConfig,
                                  StorageConfig, StorageState, hours,
                                  storage_update)


class ControlError(RuntimeError):
    pass


class ControlMode(Enum):
    GRID_CONNECTED = "grid"
    STANDALONE = "standalone"


@dataclass(frozen=True)
class ControllerState:
    p_g_prev: float = 0.

    def advance(self, decision: ControlDecision) -> "ControllerState":
        return ControllerState(p_g_prev=decision.p_g)


@dataclass(frozen=True)
class ControlFlags:
    physical_losses: bool = False
    symmetric_storage_limit: bool = True
    hard_lower_bound: bool = False


@dataclass(frozen=True)
class _Regime:
    k: float
    lo: float
    hi: float


def specialize(mode: ControlMode, weights: ControllerWeights) -> ControllerWeights:
    """Drop the objective terms a mode makes inert."""
    if mode is ControlMode.GRID_CONNECTED:
        return replace(weights, beta=0.)
    return replace(weights, gamma=0., delta=0.)


def _regimes(storage: StorageConfig, flags: ControlFlags) -> List[_Regime]:
    k = 1. + storage.eps_s
    if flags.physical_losses:
        return [_Regime(k, 0., np.inf), _Regime(1. / k, -np.inf, 0.)]
    return [_Regime(k, -np.inf, np.inf)]


def _storage_interval(regime: _Regime, y: float, pv: float,
                      storage: StorageConfig, T: float,
                      flags: ControlFlags) -> Tuple[float, float]:
    """Range of P_s allowed by the state-of-charge and power limits."""
    T_h = hours(T)
    y_free = y + T_h * pv
    scale = regime.k * T_h
    limit = storage.p_s_max / (1. + storage.eps_s)
    lo = max(regime.lo, (y_free - storage.y_max) / scale)
    hi = min(regime.hi, y_free / scale, limit)
    if flags.symmetric_storage_limit:
        lo = max(lo, -limit)
    return lo, hi


def _build_problem(p_ref, w, regime, y, pv, storage, weights, state, mode,
                   flags, T) -> qpcore.QpProblem:
    n = len(p_ref)
    s, g = n, n + 1
    T_h = hours(T)
    Q = np.zeros((n + 2, n + 2))
    c = np.zeros(n + 2)

    # Storage tracking, y_next - y_ref = a P_s + r0
    a = -regime.k * T_h
    r0 = y + T_h * pv - storage.y_ref
    Q[s, s] += 2. * weights.alpha * a ** 2
    c[s] += 2. * weights.alpha * a * r0
    offset = weights.alpha * r0 ** 2

    # Setpoint tracking
    idx = np.arange(n)
    Q[idx, idx] += 2. * weights.beta * w
    c[:n] -= 2. * weights.beta * w * p_ref
    offset += float(np.sum(weights.beta * w * p_ref ** 2))

    # Grid power and ramp
    Q[g, g] += 2. * (weights.gamma + weights.delta)
    c[g] -= 2. * weights.delta * state.p_g_prev
    offset += weights.delta * state.p_g_prev ** 2

    y_free = y + T_h * pv
    rows, rhs = [], []

    def storage_row(coef, bound):
        row = np.zeros(n + 2)
        row[s] = coef
        rows.append(row)
        rhs.append(bound)

    storage_row(regime.k * T_h, y_free)
    storage_row(-regime.k * T_h, storage.y_max - y_free)
    storage_row(1. + storage.eps_s, storage.p_s_max)
    if flags.symmetric_storage_limit:
        storage_row(-(1. + storage.eps_s), storage.p_s_max)

    a_eq = np.zeros((1, n + 2))
    a_eq[0, :n] = -1.
    a_eq[0, s] = a_eq[0, g] = 1.

    lb = np.full(n + 2, -np.inf)
    ub = np.full(n + 2, np.inf)
    lb[s], ub[s] = regime.lo, regime.hi
    if mode is ControlMode.GRID_CONNECTED:
        lb[:n] = ub[:n] = p_ref
    else:
        lb[:n], ub[:n] = 0., p_ref
        lb[g] = ub[g] = 0.

    return qpcore.QpProblem(Q=Q, c=c, lb=lb, ub=ub, a_ineq=np.array(rows),
                            b_ineq=np.array(rhs), a_eq=a_eq, b_eq=[0.],
                            offset=offset)


def _standalone_start(on, p_min, p_ref, interval, n):
    """Feasible point of a standalone on/off pattern, or None.

    The pattern is feasible iff [sum p_min, sum p_ref] over the on-sessions
    meets the storage interval. The start takes the largest feasible load,
    spread proportionally between p_min and p_ref.
    """
    on = list(on)
    lo_s, hi_s = interval
    lo = max(lo_s, float(p_min[on].sum()))
    hi = min(hi_s, float(p_ref[on].sum()))
    if lo > hi:
        return None
    x = np.zeros(n + 2)
    spread = p_ref[on] - p_min[on]
    total = float(spread.sum())
    frac = (hi - float(p_min[on].sum())) / total if total > 0. else 0.
    x[on] = p_min[on] + min(max(frac, 0.), 1.) * spread
    x[n] = x[:n].sum()
    return x


def _solve_standalone(ids, p_ref, p_min, w, regime, y, pv, storage, weights,
                      state, flags, T) -> qpcore.QpSolution:
    n = len(p_ref)
    problem = _build_problem(p_ref, w, regime, y, pv, storage, weights, state,
                             ControlMode.STANDALONE, flags, T)
    interval = _storage_interval(regime, y, pv, storage, T, flags)
    eligible = [m for m in range(n) if p_ref[m] >= p_min[m]]

    if flags.hard_lower_bound:
        on = tuple(eligible)
        x0 = _standalone_start(on, p_min, p_ref, interval, n)
        if x0 is None:
            return qpcore.QpSolution(None, np.inf, qpcore.INFEASIBLE)
        lb = problem.lb.copy()
        lb[list(on)] = p_min[list(on)]
        ub = problem.ub.copy()
        ub[[m for m in range(n) if m not in on]] = 0.
        return replace(qpcore.solve_qp(replace(problem, lb=lb, ub=ub), x0=x0),
                       pattern=on)

    # Sessions whose setpoint is below p_min can only be off
    ub = problem.ub.copy()
    ub[[m for m in range(n) if m not in eligible]] = 0.
    problem = replace(problem, ub=ub)
    # Ties go to the lexicographically smallest session-id pattern
    spec = qpcore.SemiContinuousSpec(
        {m: (float(p_min[m]), float(p_ref[m])) for m in eligible},
        order=tuple(sorted(eligible, key=lambda m: ids[m])))
    off_cost = weights.beta * w * p_ref ** 2

    def bound(on):
        return float(off_cost.sum() - off_cost[list(on)].sum())

    return qpcore.solve_semicontinuous(
        problem, spec,
        pattern_start=lambda on: _standalone_start(on, p_min, p_ref, interval, n),
        pattern_bound=bound)


def _solve_grid(p_ref, regime, y, pv, storage, weights, state, flags,
                T) -> qpcore.QpSolution:
    n = len(p_ref)
    problem = _build_problem(p_ref, np.zeros(n), regime, y, pv, storage,
                             weights, state, ControlMode.GRID_CONNECTED, flags, T)
    lo, hi = _storage_interval(regime, y, pv, storage, T, flags)
    if lo > hi:
        return qpcore.QpSolution(None, np.inf, qpcore.INFEASIBLE)
    x0 = np.zeros(n + 2)
    x0[:n] = p_ref
    x0[n] = min(max(0., lo), hi)
    x0[n + 1] = p_ref.sum() - x0[n]
    return qpcore.solve_qp(problem, x0=x0)


def _absorbable_pv(p_ref, p_min, y, storage, T) -> float:
    """Largest PV inflow that keeps y_next <= y_max when every eligible
    session draws its setpoint through the storage."""
    k = 1. + storage.eps_s
    load = float(p_ref[p_ref >= p_min].sum())
    p_s = min(load, storage.p_s_max / k)
    cap = (storage.y_max - y) / hours(T) + k * p_s
    return max(0., cap - qpcore.TOLERANCES.feasibility)


def _dispatch(ids, p_ref, p_min, w, y, pv, storage, weights, state, mode,
              flags, T) -> Optional[qpcore.QpSolution]:
    """Best solution over the storage regimes, None when all are infeasible."""
    best: Optional[qpcore.QpSolution] = None
    for regime in _regimes(storage, flags):
        if mode is ControlMode.GRID_CONNECTED:
            sol = _solve_grid(p_ref, regime, y, pv, storage, weights, state,
                              flags, T)
        else:
            sol = _solve_standalone(ids, p_ref, p_min, w, regime, y, pv,
                                    storage, weights, state, flags, T)
        if not sol.optimal:
            continue
        if best is None or sol.objective < best.objective \
                - qpcore.TOLERANCES.tie * max(1., abs(best.objective)):
            best = sol
    return best


def _fallback(ids, p_ref, p_raw, y, pv, storage, T) -> ControlDecision:
    """All sessions off, storage idle, PV curtailed to the free capacity."""
    T_h = hours(T)
    pv_used = min(pv, max(0., (storage.y_max - y) / T_h))
    if pv_used < pv:
        warnings.warn(f"Storage full, curtailing PV from {pv:.3f} kW to "
                      f"{pv_used:.3f} kW")
    return ControlDecision(p={i: 0. for i in ids}, p_s=0., p_g=0.,
                           y_next=min(storage.y_max, y + T_h * pv_used),
                           p_ref=dict(zip(ids, p_ref.tolist())),
                           p_ref_raw=dict(zip(ids, p_raw.tolist())),
                           pv_used=pv_used, objective=np.nan,
                           kkt_residual=0., fallback=True)


def control_step(sessions: Sequence[ChargingSession], station: StationConfig,
                 storage: StorageConfig, storage_state: StorageState,
                 pv_now: float, weights: ControllerWeights, mode: ControlMode,
                 state: ControllerState, t: float,
                 flags: ControlFlags = ControlFlags()) -> ControlDecision:
    """Run the setpoint step and the MPC step for one sampling instant.

    Args:
        sessions (list): Sessions plugged at t
        station (StationConfig): Station budget
        storage (StorageConfig): Storage limits and reference
        storage_state (StorageState): Current state of charge
        pv_now (float): Effective PV power at t in kW
        weights (ControllerWeights): Objective weights and sampling time
        mode (ControlMode): Grid-connected or standalone
        state (ControllerState): Previous grid power
        t (float): Scenario time in seconds
        flags (ControlFlags): Modelling switches

    Returns:
        decision (ControlDecision)
    """
    assert isinstance(mode, ControlMode), f"Invalid mode {mode}"
    if pv_now < 0.:
        raise ValueError(f"pv_now must be non-negative, got {pv_now}")
    y = storage_state.y
    if not 0. <= y <= storage.y_max:
        raise ValueError(f"Storage state {y} outside [0, {storage.y_max}]")

    active, p_raw, setpoints, prio = reference_setpoints(
        sessions, t, weights, station.p_cs_max)
    ids = setpoints.ids
    p_ref = setpoints.p_bar
    p_min = np.array([s.p_min for s in active], dtype=float)
    eff = specialize(mode, weights)
    T = weights.T

    best = _dispatch(ids, p_ref, p_min, prio.w, y, pv_now, storage, eff,
                     state, mode, flags, T)
    pv_used = pv_now

    if best is None and mode is ControlMode.STANDALONE:
        # Storage cannot take the PV surplus, curtail it
        pv_cap = _absorbable_pv(p_ref, p_min, y, storage, T)
        if pv_cap < pv_now:
            best = _dispatch(ids, p_ref, p_min, prio.w, y, pv_cap, storage,
                             eff, state, mode, flags, T)
            if best is not None:
                pv_used = pv_cap
                warnings.warn(f"Storage full, curtailing PV from {pv_now:.3f}"
                              f" kW to {pv_used:.3f} kW")

    if best is None:
        if mode is ControlMode.GRID_CONNECTED:
            raise ControlError(f"Grid-connected dispatch infeasible at t={t} s"
                               f" (y={y:.6g} kWh, pv={pv_now:.6g} kW)")
        return _fallback(ids, p_ref, p_raw, y, pv_now, storage, T)

    n = len(ids)
    if mode is ControlMode.GRID_CONNECTED:
        p = p_ref.copy()
        p_s = float(best.x[n])
        p_g = float(p.sum()) - p_s
    else:
        p = np.clip(best.x[:n], 0., p_ref)
        p[[m for m in range(n) if m not in best.pattern]] = 0.
        p_s = float(p.sum())
        p_g = 0.

    y_next = storage_update(y, p_s, pv_used, storage, T, flags.physical_losses)
    return ControlDecision(p=dict(zip(ids, p.tolist())), p_s=p_s, p_g=p_g,
                           y_next=y_next,
                           p_ref=dict(zip(ids, p_ref.tolist())),
                           p_ref_raw=dict(zip(ids, p_raw.tolist())),
                           pv_used=pv_used, objective=best.objective,
                           kkt_residual=best.kkt_residual,
                           fallback=pv_used < pv_now)
