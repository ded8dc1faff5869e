"""Data model shared by the allocator, the controller and the simulator.

Units: power in kW, energy in kWh, scenario clock in seconds. Durations are
converted to hours with `hours()` wherever they multiply a power.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np


SECONDS_PER_HOUR = 3600.
COMPLETION_TOL_KWH = 1e-6


class PvRangeError(ValueError):
    pass


def hours(seconds: float) -> float:
    return seconds / SECONDS_PER_HOUR


@dataclass(frozen=True)
class ChargingSession:
    id: str
    t_arr: float
    x: float
    x_max: float
    p_min: float
    p_max: float
    plug: int = -1

    def __post_init__(self):
        if not 0. <= self.x <= self.x_max:
            raise ValueError(f"Session {self.id}: state of charge {self.x} "
                             f"outside [0, {self.x_max}]")
        if not 0. < self.p_min <= self.p_max:
            raise ValueError(f"Session {self.id}: need 0 < p_min <= p_max, "
                             f"got {self.p_min}, {self.p_max}")

    @property
    def is_complete(self) -> bool:
        return self.x_max - self.x <= COMPLETION_TOL_KWH

    def charged(self, p: float, T: float) -> "ChargingSession":
        """Return the session after charging at p kW for T seconds. The
        battery stops absorbing at x_max."""
        x = min(self.x_max, self.x + hours(T) * p)
        return ChargingSession(self.id, self.t_arr, x, self.x_max,
                               self.p_min, self.p_max, self.plug)


@dataclass(frozen=True)
class StationConfig:
    p_cs_max: float
    plugs: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "plugs", tuple(float(p) for p in self.plugs))
        if not self.p_cs_max > 0.:
            raise ValueError(f"Station budget must be > 0, got {self.p_cs_max}")
        if not self.plugs or min(self.plugs) <= 0.:
            raise ValueError(f"Need at least one plug, all levels > 0, got "
                             f"{self.plugs}")

    @property
    def n_plugs(self) -> int:
        return len(self.plugs)


@dataclass(frozen=True)
class StorageConfig:
    y_max: float
    p_s_max: float
    eps_s: float
    y_ref: float

    def __post_init__(self):
        if not self.y_max > 0.:
            raise ValueError(f"Storage capacity must be > 0, got {self.y_max}")
        if not 0. < self.y_ref <= self.y_max:
            raise ValueError(f"Storage reference {self.y_ref} outside "
                             f"(0, {self.y_max}]")
        if not self.p_s_max > 0.:
            raise ValueError(f"Storage power limit must be > 0, got {self.p_s_max}")
        if not self.eps_s >= 0.:
            raise ValueError(f"Storage loss must be >= 0, got {self.eps_s}")


@dataclass(frozen=True)
class StorageState:
    y: float

    def __post_init__(self):
        if not self.y >= 0.:
            raise ValueError(f"Storage state must be >= 0, got {self.y}")


@dataclass(frozen=True)
class PvProfile:
    """Step-hold PV series. `times` are sample instants in seconds, `raw` the
    raw PV output in kW."""
    times: np.ndarray
    raw: np.ndarray
    eps_pv: float
    nominal: float

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        raw = np.array(self.raw, dtype=float)
        assert times.ndim == 1 and times.shape == raw.shape, \
            "PV times and samples must be 1-d arrays of equal length"
        if len(times) == 0:
            raise ValueError("PV profile has no samples")
        if np.any(np.diff(times) <= 0):
            raise ValueError("PV sample times must be strictly increasing")
        times.setflags(write=False)
        raw.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "raw", raw)

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def effective(self) -> np.ndarray:
        return self.raw * (1. - self.eps_pv)


def effective_pv(profile: PvProfile, t: float) -> float:
    """PV power available at time t after conversion losses.

    Args:
        profile (PvProfile): Raw PV series
        t (float): Scenario time in seconds

    Returns:
        power (float): raw(t) * (1 - eps_pv) in kW, step-hold between samples
    """
    t0, t1 = profile.span
    if not t0 <= t <= t1:
        raise PvRangeError(f"t={t} s outside PV profile span [{t0}, {t1}] s")
    i = int(np.searchsorted(profile.times, t, side="right")) - 1
    return max(0., float(profile.raw[i]) * (1. - profile.eps_pv))


@dataclass(frozen=True)
class ControllerWeights:
    alpha: float
    beta: float
    gamma: float
    delta: float
    e: float
    T: float

    def __post_init__(self):
        for key in ("alpha", "beta", "gamma", "delta", "e"):
            if not getattr(self, key) >= 0.:
                raise ValueError(f"Weight {key} must be >= 0, got "
                                 f"{getattr(self, key)}")
        if not self.T > 0.:
            raise ValueError(f"Sampling time must be > 0, got {self.T}")


@dataclass(frozen=True)
class ControlDecision:
    """Output of one control iteration. `p` and the reference vectors are
    keyed by session id."""
    p: Dict[str, float]
    p_s: float
    p_g: float
    y_next: float
    p_ref: Dict[str, float] = field(default_factory=dict)
    p_ref_raw: Dict[str, float] = field(default_factory=dict)
    pv_used: float = 0.
    objective: float = 0.
    kkt_residual: float = 0.
    fallback: bool = False

    @property
    def p_total(self) -> float:
        return float(sum(self.p.values()))


def storage_update(y: float, p_s: float, pv: float, storage: StorageConfig,
                   T: float, physical_losses: bool = False) -> float:
    """Storage state of charge after one sampling period.

    With `physical_losses` the (1 + eps_s) factor applies on discharge only and
    charging is scaled by 1 / (1 + eps_s).
    """
    T_h = hours(T)
    k = loss_factor(p_s, storage.eps_s, physical_losses)
    return y - k * T_h * p_s + T_h * pv


def loss_factor(p_s: float, eps_s: float, physical_losses: bool) -> float:
    if physical_losses and p_s < 0.:
        return 1. / (1. + eps_s)
    return 1. + eps_s


@dataclass(frozen=True)
class FleetEvent:
    ev_id: str
    t_arr: float
    plug_level: float
    x0: float
    x_max: float
    p_min: float
    t_depart: Optional[float] = None

    def session(self, plug: int) -> ChargingSession:
        return ChargingSession(id=self.ev_id, t_arr=self.t_arr, x=self.x0,
                               x_max=self.x_max, p_min=self.p_min,
                               p_max=self.plug_level, plug=plug)
