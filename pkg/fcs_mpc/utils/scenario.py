"""Scenario files: INI key/value trees read with configparser.

The schema is documented in scenarios/README.md. Times are in seconds, power
in kW, energy in kWh. Every fleet event has its own `[ev.<id>]` section.
"""
import configparser
from dataclasses import dataclass, field, replace
import os
import re
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fcs_mpc.models.controller import ControlFlags, ControlMode
from fcs_mpc.utils import data_utils
from fcs_mpc.utils.evaluation import session_summary
from fcs_mpc.utils.domain import (ControllerWeights, FleetEvent, PvProfile,
                                  StationConfig, StorageConfig)


PV_SOURCES = ("synthetic", "constant", "csv")
RESERVED_IDS = ("pv", "s", "g", "total")
EV_PREFIX = "ev."
_ID_PATTERN = re.compile(r"^[A-Za-z0-9_-]+$")
_REQUIRED = object()


class ScenarioError(ValueError):
    """Invalid scenario. `errors` lists every problem found."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class PvSource:
    kind: str
    nominal: float
    eps_pv: float
    path: str = ""
    peak_s: float = 0.
    width_s: float = 0.
    level_kw: float = 0.


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    station: StationConfig
    storage: StorageConfig
    y0: float
    pv: PvSource
    fleet: Tuple[FleetEvent, ...]
    weights: ControllerWeights
    mode: ControlMode
    horizon: float
    flags: ControlFlags = ControlFlags()
    base_dir: str = field(default=".", compare=False)

    @property
    def n_steps(self) -> int:
        """Number of logged rows, horizon / T + 1"""
        return int(round(self.horizon / self.weights.T)) + 1


def _to_bool(value: str) -> bool:
    try:
        return configparser.ConfigParser.BOOLEAN_STATES[value.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {value}")


def _to_list(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


class _Reader:
    """Typed access to a parsed file. Collects errors instead of raising and
    remembers which keys were read, for the strict unknown-key check."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser
        self.errors: List[str] = []
        self.used = {}

    def get(self, section, key, conv=float, default=_REQUIRED):
        self.used.setdefault(section, set()).add(key)
        if not self.parser.has_section(section):
            if default is _REQUIRED:
                self._missing_section(section)
            return None if default is _REQUIRED else default
        if not self.parser.has_option(section, key):
            if default is _REQUIRED:
                self.errors.append(f"[{section}] missing key '{key}'")
                return None
            return default
        raw = self.parser.get(section, key)
        try:
            return conv(raw)
        except ValueError:
            self.errors.append(f"[{section}] {key}: cannot parse '{raw}'")
            return None

    def _missing_section(self, section):
        msg = f"missing section [{section}]"
        if msg not in self.errors:
            self.errors.append(msg)

    def check_unknown(self):
        for section in self.parser.sections():
            if section not in self.used:
                self.errors.append(f"unknown section [{section}]")
                continue
            for key in self.parser.options(section):
                if key not in self.used[section]:
                    self.errors.append(f"[{section}] unknown key '{key}'")


def _parse(parser: configparser.ConfigParser, base_dir: str,
           strict: bool) -> ScenarioConfig:
    r = _Reader(parser)
    name = r.get("scenario", "name", str)
    mode = r.get("scenario", "mode", ControlMode)
    horizon = r.get("scenario", "horizon_s")

    station = (r.get("station", "p_cs_max_kw"), r.get("station", "plugs_kw", _to_list))
    storage = [r.get("storage", k) for k in
               ("y_max_kwh", "p_s_max_kw", "eps_s", "y_ref_kwh")]
    y0 = r.get("storage", "y0_kwh")

    kind = r.get("pv", "source", str)
    pv = dict(kind=kind, nominal=r.get("pv", "nominal_kw"),
              eps_pv=r.get("pv", "eps_pv"))
    pv_keys = {"csv": [("path", str)],
               "synthetic": [("peak_s", float), ("width_s", float)],
               "constant": [("level_kw", float)]}
    if kind is not None and kind not in pv_keys:
        r.errors.append(f"[pv] source: must be one of {', '.join(PV_SOURCES)}")
    for key, conv in pv_keys.get(kind, []):
        pv[key] = r.get("pv", key, conv)

    weights = [r.get("weights", k) for k in
               ("alpha", "beta", "gamma", "delta", "e", "sampling_time_s")]
    defaults = ControlFlags()
    flags = {k: r.get("flags", k, _to_bool, getattr(defaults, k))
             for k in ("physical_losses", "symmetric_storage_limit",
                       "hard_lower_bound")}

    fleet = []
    for section in parser.sections():
        if not section.startswith(EV_PREFIX):
            continue
        ev_id = section[len(EV_PREFIX):]
        values = [r.get(section, k) for k in
                  ("t_arr_s", "plug_kw", "x0_kwh", "x_max_kwh", "p_min_kw")]
        t_depart = r.get(section, "t_depart_s", float, None)
        fleet.append((ev_id, values, t_depart))

    if strict:
        r.check_unknown()
    if r.errors:
        raise ScenarioError(r.errors)

    built = {}
    for section, make in [
            ("station", lambda: StationConfig(p_cs_max=station[0],
                                              plugs=station[1])),
            ("storage", lambda: StorageConfig(*storage)),
            ("weights", lambda: ControllerWeights(*weights))]:
        try:
            built[section] = make()
        except ValueError as e:
            r.errors.append(f"[{section}] {e}")
    if r.errors:
        raise ScenarioError(r.errors)

    return ScenarioConfig(
        name=name,
        station=built["station"],
        storage=built["storage"],
        y0=y0,
        pv=PvSource(**{k: v for k, v in pv.items() if v is not None}),
        fleet=tuple(FleetEvent(ev_id, *values, t_depart=t_depart)
                    for ev_id, values, t_depart in fleet),
        weights=built["weights"],
        mode=mode,
        horizon=horizon,
        flags=ControlFlags(**flags),
        base_dir=base_dir)


def read_scenario(path: str, strict: bool = True) -> ScenarioConfig:
    """Parse a scenario file without the semantic checks"""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r") as f:
            parser.read_file(f)
    except OSError as e:
        raise ScenarioError([f"cannot read {path}: {e.strerror}"])
    except configparser.Error as e:
        raise ScenarioError([f"{path}: {e.message}"])
    return _parse(parser, os.path.dirname(os.path.abspath(path)), strict)


def load_scenario(path: str, strict: bool = True) -> ScenarioConfig:
    """Read and validate a scenario file.

    Args:
        path (str): Scenario file
        strict (bool): Reject unknown sections and keys

    Returns:
        scenario (ScenarioConfig)

    Raises:
        ScenarioError: With the list of all problems found
    """
    scenario = read_scenario(path, strict)
    errors = validate_scenario(scenario)
    if errors:
        raise ScenarioError(errors)
    return scenario


def _fmt(value: float) -> str:
    s = repr(float(value))
    return s[:-2] if s.endswith(".0") else s


def save_scenario(scenario: ScenarioConfig, path: str):
    """Write a scenario so that loading the file gives an equal config"""
    parser = configparser.ConfigParser(interpolation=None)
    parser["scenario"] = {"name": scenario.name,
                          "mode": scenario.mode.value,
                          "horizon_s": _fmt(scenario.horizon)}
    parser["station"] = {
        "p_cs_max_kw": _fmt(scenario.station.p_cs_max),
        "plugs_kw": ", ".join(_fmt(p) for p in scenario.station.plugs)}
    st = scenario.storage
    parser["storage"] = {"y_max_kwh": _fmt(st.y_max),
                         "p_s_max_kw": _fmt(st.p_s_max),
                         "eps_s": _fmt(st.eps_s),
                         "y_ref_kwh": _fmt(st.y_ref),
                         "y0_kwh": _fmt(scenario.y0)}

    pv = scenario.pv
    section = {"source": pv.kind, "nominal_kw": _fmt(pv.nominal),
               "eps_pv": _fmt(pv.eps_pv)}
    if pv.kind == "csv":
        target_dir = os.path.dirname(os.path.abspath(path))
        section["path"] = os.path.relpath(
            os.path.join(scenario.base_dir, pv.path), target_dir)
    elif pv.kind == "synthetic":
        section.update(peak_s=_fmt(pv.peak_s), width_s=_fmt(pv.width_s))
    else:
        section["level_kw"] = _fmt(pv.level_kw)
    parser["pv"] = section

    w = scenario.weights
    parser["weights"] = {"alpha": _fmt(w.alpha), "beta": _fmt(w.beta),
                         "gamma": _fmt(w.gamma), "delta": _fmt(w.delta),
                         "e": _fmt(w.e), "sampling_time_s": _fmt(w.T)}
    fl = scenario.flags
    parser["flags"] = {"physical_losses": str(fl.physical_losses).lower(),
                       "symmetric_storage_limit":
                           str(fl.symmetric_storage_limit).lower(),
                       "hard_lower_bound": str(fl.hard_lower_bound).lower()}

    for ev in scenario.fleet:
        sec = {"t_arr_s": _fmt(ev.t_arr), "plug_kw": _fmt(ev.plug_level),
               "x0_kwh": _fmt(ev.x0), "x_max_kwh": _fmt(ev.x_max),
               "p_min_kw": _fmt(ev.p_min)}
        if ev.t_depart is not None:
            sec["t_depart_s"] = _fmt(ev.t_depart)
        parser[f"{EV_PREFIX}{ev.ev_id}"] = sec

    with open(path, "w") as f:
        parser.write(f)


def build_pv_profile(scenario: ScenarioConfig) -> PvProfile:
    pv = scenario.pv
    T = scenario.weights.T
    if pv.kind == "csv":
        times, raw = data_utils.read_pv_csv(os.path.join(scenario.base_dir,
                                                         pv.path))
    elif pv.kind == "synthetic":
        times, raw = data_utils.synthetic_pv(pv.nominal, pv.peak_s, pv.width_s,
                                             scenario.horizon, T)
    elif pv.kind == "constant":
        times, raw = data_utils.constant_pv(pv.level_kw, scenario.horizon, T)
    else:
        raise ScenarioError([f"unknown PV source '{pv.kind}'"])
    return PvProfile(times=times, raw=raw, eps_pv=pv.eps_pv, nominal=pv.nominal)


def _check(errors: List[str], ok: bool, msg: str):
    if not ok:
        errors.append(msg)


def validate_scenario(scenario: ScenarioConfig) -> List[str]:
    """Check every invariant of a scenario.

    Returns:
        errors (list): Empty when the scenario is valid
    """
    errors: List[str] = []
    st, w, station = scenario.storage, scenario.weights, scenario.station

    # Station, storage and weight ranges are checked when those are built
    _check(errors, 0 <= scenario.y0 <= st.y_max,
           "storage: need 0 <= y0_kwh <= y_max_kwh")
    _check(errors, scenario.horizon >= 0, "scenario: horizon_s must be >= 0")
    if scenario.horizon >= 0:
        steps = scenario.horizon / w.T
        _check(errors, abs(steps - round(steps)) < 1e-9,
               "scenario: horizon_s must be a multiple of sampling_time_s")

    pv = scenario.pv
    _check(errors, pv.nominal > 0, "pv: nominal_kw must be > 0")
    _check(errors, 0 <= pv.eps_pv < 1, "pv: need 0 <= eps_pv < 1")
    if pv.kind == "synthetic":
        _check(errors, pv.width_s > 0, "pv: width_s must be > 0")
    if pv.kind == "csv" and not os.path.isfile(
            os.path.join(scenario.base_dir, pv.path)):
        errors.append(f"pv: file not found: {pv.path}")
    elif not errors:
        try:
            profile = build_pv_profile(scenario)
            eff = profile.effective
            _check(errors, bool(np.all((eff >= 0) & (eff <= pv.nominal))),
                   "pv: effective samples must lie in [0, nominal_kw]")
            t0, t1 = profile.span
            _check(errors, t0 <= 0 and t1 >= scenario.horizon,
                   f"pv: profile span [{t0}, {t1}] s does not cover the horizon")
            _check(errors, float(eff.max()) <= st.p_s_max,
                   "pv: peak effective PV exceeds storage p_s_max_kw")
        except (ValueError, KeyError, pd.errors.ParserError) as e:
            errors.append(f"pv: {e}")

    seen = set()
    for ev in scenario.fleet:
        tag = f"ev.{ev.ev_id}"
        _check(errors, bool(_ID_PATTERN.match(ev.ev_id)),
               f"{tag}: id may only use letters, digits, '_' and '-'")
        _check(errors, ev.ev_id not in RESERVED_IDS, f"{tag}: reserved id")
        _check(errors, ev.ev_id not in seen, f"{tag}: duplicate id")
        seen.add(ev.ev_id)
        _check(errors, ev.t_arr >= 0, f"{tag}: t_arr_s must be >= 0")
        _check(errors, 0 <= ev.x0 < ev.x_max, f"{tag}: need 0 <= x0_kwh < x_max_kwh")
        _check(errors, 0 < ev.p_min <= ev.plug_level,
               f"{tag}: need 0 < p_min_kw <= plug_kw")
        _check(errors, ev.plug_level in station.plugs,
               f"{tag}: no plug of {_fmt(ev.plug_level)} kW at the station")
        if ev.t_depart is not None:
            _check(errors, ev.t_depart > ev.t_arr,
                   f"{tag}: t_depart_s must be after t_arr_s")
    return errors


def apply_overrides(scenario: ScenarioConfig, mode: Optional[str] = None,
                    **overrides) -> ScenarioConfig:
    """Return a copy of the scenario with command-line values applied.

    Args:
        scenario (ScenarioConfig)
        mode (str): 'standalone' or 'grid'
        overrides: Any of alpha, beta, gamma, delta, e (weights), y0, horizon.
                   None values are ignored.
    """
    weight_keys = {"alpha", "beta", "gamma", "delta", "e"}
    unknown = set(overrides) - weight_keys - {"y0", "horizon"}
    if unknown:
        raise ScenarioError([f"unknown override '{k}'" for k in sorted(unknown)])

    values = {k: float(v) for k, v in overrides.items() if v is not None}
    try:
        weights = replace(scenario.weights,
                          **{k: v for k, v in values.items() if k in weight_keys})
    except ValueError as e:
        raise ScenarioError([f"weights: {e}"])
    top = {k: v for k, v in values.items() if k in ("y0", "horizon")}
    if mode is not None:
        top["mode"] = ControlMode(mode)
    return replace(scenario, weights=weights, **top)


def write_logs(logs, out_dir: str, scenario: Optional[ScenarioConfig] = None,
               summary: Optional[pd.DataFrame] = None) -> List[str]:
    """Write trace.csv and summary.csv to out_dir, plus the effective
    scenario.cfg when a scenario is given.

    Returns:
        paths (list): Written files
    """
    if len(logs) == 0:
        raise ValueError("Cannot write an empty log")
    os.makedirs(out_dir, exist_ok=True)

    trace_path = os.path.join(out_dir, "trace.csv")
    data_utils.trace_frame(logs).to_csv(trace_path, index=False,
                                        float_format=data_utils.FLOAT_FORMAT)
    if summary is None:
        summary = session_summary(logs, scenario.fleet if scenario else ())
    summary_path = os.path.join(out_dir, "summary.csv")
    summary.to_csv(summary_path, index=False,
                   float_format=data_utils.FLOAT_FORMAT)
    paths = [trace_path, summary_path]

    if scenario is not None:
        cfg_path = os.path.join(out_dir, "scenario.cfg")
        save_scenario(scenario, cfg_path)
        paths.append(cfg_path)
    return paths
