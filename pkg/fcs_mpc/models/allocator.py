"""Charging-setpoint definition step.

Every sampling period each plugged vehicle asks for the rate that would fill
its battery within one period, clamped to its plug limits. When the requests
exceed the station budget, the setpoints are cut back by a priority-weighted
least-squares projection, so that vehicles waiting longer lose less.
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from fcs_mpc.utils.domain import ChargingSession, ControllerWeights, hours


@dataclass(frozen=True)
class PriorityWeights:
    ids: Tuple[str, ...]
    w: np.ndarray

    def __post_init__(self):
        assert len(self.ids) == len(self.w), "one weight per session"


@dataclass(frozen=True)
class SetpointVector:
    """Allocated setpoints. `lam` is the multiplier of the station budget
    (0 when the budget is not binding)."""
    ids: Tuple[str, ...]
    p_bar: np.ndarray
    lam: float = 0.

    def as_dict(self) -> Dict[str, float]:
        return {i: float(p) for i, p in zip(self.ids, self.p_bar)}


def desired_rate(session: ChargingSession, T: float) -> float:
    """Power that fills the battery within one sampling period T (seconds)."""
    return (session.x_max - session.x) / hours(T)


def clamp_rate(rate: float, session: ChargingSession) -> float:
    return min(max(rate, session.p_min), session.p_max)


def priority_weights(sessions: Sequence[ChargingSession], t: float, e: float,
                     T: float) -> PriorityWeights:
    """Diagonal weights w_m = ((t - t_arr_m) / T + 1)^e.

    Elapsed time is counted in sampling periods. The +1 keeps a vehicle that
    arrives at t strictly positive.
    """
    elapsed = np.array([(t - s.t_arr) / T for s in sessions], dtype=float)
    if np.any(elapsed < 0.):
        raise ValueError(f"Session arrived after t={t}")
    return PriorityWeights(ids=tuple(s.id for s in sessions),
                           w=(elapsed + 1.) ** e)


def allocate_setpoints(p_bar_raw, weights: PriorityWeights,
                       p_cs_max: float) -> SetpointVector:
    """Minimize 1/2 (P - P_raw)' A (P - P_raw) s.t. sum(P) <= p_cs_max and
    0 <= P <= P_raw, with A = diag(w).

    Solved by waterfilling: P_m = P_raw_m - lam / w_m on the free sessions,
    sessions driven below zero are clamped at 0 and lam is recomputed.

    Args:
        p_bar_raw (array): Clamped requested powers in kW
        weights (PriorityWeights): Strictly positive weights
        p_cs_max (float): Station budget in kW

    Returns:
        setpoints (SetpointVector)
    """
    p = np.asarray(p_bar_raw, dtype=float).reshape(-1)
    w = np.asarray(weights.w, dtype=float)
    assert p.shape == w.shape, "p_bar_raw and weights differ in length"
    if np.any(w <= 0.):
        raise ValueError("priority weights must be strictly positive")

    if p.size == 0 or p.sum() <= p_cs_max:
        return SetpointVector(weights.ids, p.copy(), 0.)

    inv_w = 1. / w
    free = np.ones(p.size, dtype=bool)
    lam, out = 0., np.zeros_like(p)
    while free.any():
        lam = (p[free].sum() - p_cs_max) / inv_w[free].sum()
        out = np.where(free, p - lam * inv_w, 0.)
        clamped = free & (out < 0.)
        if not clamped.any():
            break
        free &= ~clamped
    out = np.where(free, out, 0.)
    return SetpointVector(weights.ids, out, float(lam))


def reference_setpoints(sessions: Sequence[ChargingSession], t: float,
                        weights: ControllerWeights, p_cs_max: float):
    """Complete setpoint step for the sessions plugged at t.

    Returns:
        active (list): Sessions that still need energy, in input order
        p_bar_raw (np.ndarray): Clamped requested rates
        setpoints (SetpointVector): Allocated setpoints
        prio (PriorityWeights): Weights used for the allocation
    """
    active: List[ChargingSession] = [s for s in sessions if not s.is_complete]
    p_bar_raw = np.array([clamp_rate(desired_rate(s, weights.T), s)
                          for s in active], dtype=float)
    prio = priority_weights(active, t, weights.e, weights.T)
    setpoints = allocate_setpoints(p_bar_raw, prio, p_cs_max)
    return active, p_bar_raw, setpoints, prio
