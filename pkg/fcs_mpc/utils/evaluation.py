import os
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from fcs_mpc.utils import data_utils
from fcs_mpc.utils.domain import COMPLETION_TOL_KWH, FleetEvent, hours


SUMMARY_COLUMNS = ["ev_id", "plug", "t_arr_s", "t_plug_s", "t_end_s",
                   "end_reason", "energy_kwh", "x_final_kwh"]


def grid_ramp_variation(logs) -> float:
    """Sum of squared grid power increments over a run"""
    p_g = np.array([row.p_g for row in logs], dtype=float)
    return float(np.sum(np.diff(p_g) ** 2))


def relative_deviations(row) -> Dict[str, float]:
    """(P_raw - P_ref) / P_raw per session of one log row"""
    return {sid: (s.ref_raw - s.ref) / s.ref_raw if s.ref_raw > 0. else 0.
            for sid, s in row.sessions.items()}


def overload_rows(logs, p_cs_max: float, tol: float = 1e-9) -> List:
    """Rows where the requested power exceeded the station budget"""
    return [row for row in logs
            if sum(s.ref_raw for s in row.sessions.values()) > p_cs_max + tol]


def energy_delivered(logs, ev_id: str, until_s: float = np.inf) -> float:
    """Energy in kWh delivered to one vehicle by steps starting before
    until_s"""
    return float(sum(row.sessions[ev_id].x_next - row.sessions[ev_id].x
                     for row in logs
                     if row.t < until_s and ev_id in row.sessions))


def first_charging_step(logs, ev_id: str) -> Optional[float]:
    """Time of the first step at which the vehicle got at least p_min"""
    for row in logs:
        s = row.sessions.get(ev_id)
        if s is not None and s.p >= s.p_min - 1e-9:
            return row.t
    return None


def session_summary(logs, fleet: Sequence[FleetEvent] = ()) -> pd.DataFrame:
    """One record per vehicle: plug, arrival, plug-in time, end time, end
    reason and delivered energy"""
    records = []
    last_t = logs[-1].t if len(logs) else 0.
    seen = set()
    for sid in data_utils.session_order(logs):
        rows = [row for row in logs if sid in row.sessions]
        first, last = rows[0].sessions[sid], rows[-1].sessions[sid]
        full = last.x_max - last.x_next <= COMPLETION_TOL_KWH
        if full:
            reason = "complete"
        elif rows[-1].t >= last_t:
            reason = "charging"
        else:
            reason = "departed"
        records.append({
            "ev_id": sid, "plug": first.plug, "t_arr_s": first.t_arr,
            "t_plug_s": rows[0].t,
            "t_end_s": rows[-1].t + rows[-1].dt if reason != "charging" else np.nan,
            "end_reason": reason,
            "energy_kwh": last.x_next - first.x, "x_final_kwh": last.x_next})
        seen.add(sid)

    for ev in fleet:
        if ev.ev_id in seen or ev.t_arr > last_t:
            continue
        left = ev.t_depart is not None and ev.t_depart <= last_t
        records.append({
            "ev_id": ev.ev_id, "plug": -1, "t_arr_s": ev.t_arr,
            "t_plug_s": np.nan, "t_end_s": ev.t_depart if left else np.nan,
            "end_reason": "departed" if left else "queued",
            "energy_kwh": 0., "x_final_kwh": ev.x0})
    return pd.DataFrame.from_records(records, columns=SUMMARY_COLUMNS)


def evaluate_run(logs, verbose=True) -> Dict[str, float]:
    """Headline numbers of a run, printed when verbose"""
    y = np.array([row.y for row in logs] + [logs[-1].y_next])
    p_g = np.array([row.p_g for row in logs])
    metrics = {
        "peak_grid_kw": float(np.max(np.abs(p_g))),
        "grid_ramp_variation": grid_ramp_variation(logs),
        "y_min_kwh": float(y.min()),
        "y_max_kwh": float(y.max()),
        "energy_kwh": float(sum(row.p_total * hours(row.dt) for row in logs)),
        "max_kkt_residual": float(max(row.kkt_residual for row in logs)),
        "fallback_steps": int(sum(row.fallback for row in logs)),
    }

    worst: Dict[str, float] = {}
    for row in logs:
        for sid, d in relative_deviations(row).items():
            worst[sid] = max(worst.get(sid, 0.), d)

    if verbose:
        print(f"Peak grid power: {metrics['peak_grid_kw']:.3f} kW")
        print(f"Grid ramp variation: {metrics['grid_ramp_variation']:.4g} kW^2")
        print(f"Storage range: [{metrics['y_min_kwh']:.3f}, "
              f"{metrics['y_max_kwh']:.3f}] kWh")
        print(f"Energy delivered: {metrics['energy_kwh']:.3f} kWh")
        print(f"Max KKT residual: {metrics['max_kkt_residual']:.2e}")
        if metrics["fallback_steps"]:
            print(f"Fallback steps: {metrics['fallback_steps']}")
        for sid, d in worst.items():
            print(f"  {sid}: worst setpoint degradation {100 * d:.1f}%")
    return metrics


def plot_trace(trace: pd.DataFrame, out_dir: str) -> List[str]:
    """Save state-of-charge, aggregate power and per-plug figures as PNG.

    Args:
        trace (pd.DataFrame): Content of a trace.csv
        out_dir (str): Target directory

    Returns:
        paths (list): Written image files
    """
    os.makedirs(out_dir, exist_ok=True)
    t_min = trace["t_s"] / 60.
    ids = data_utils.session_ids(trace.columns)
    paths = []

    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    axes[0].plot(t_min, trace["y_kwh"], color="tab:green")
    axes[0].set_ylabel("storage [kWh]")
    for sid in ids:
        axes[1].plot(t_min, trace[f"x_{sid}_kwh"], label=sid)
    axes[1].set_ylabel("battery [kWh]")
    axes[1].set_xlabel("time [min]")
    if ids:
        axes[1].legend()
    paths.append(_save(fig, out_dir, "soc.png"))

    fig, ax = plt.subplots(figsize=(8, 4))
    for col, label in [("p_total_kw", "charging"), ("p_pv_kw", "PV"),
                       ("p_s_kw", "storage"), ("p_g_kw", "grid")]:
        ax.plot(t_min, trace[col], label=label)
    ax.set_xlabel("time [min]")
    ax.set_ylabel("power [kW]")
    ax.legend()
    paths.append(_save(fig, out_dir, "power.png"))

    if ids:
        fig, axes = plt.subplots(len(ids), 1, figsize=(8, 2.5 * len(ids)),
                                 sharex=True, squeeze=False)
        for a, sid in zip(axes[:, 0], ids):
            a.step(t_min, trace[f"ref_{sid}_kw"], where="post", label="reference")
            a.step(t_min, trace[f"p_{sid}_kw"], where="post", label="delivered")
            a.set_title(sid)
            a.set_ylabel("kW")
        axes[-1, 0].set_xlabel("time [min]")
        axes[0, 0].legend()
        paths.append(_save(fig, out_dir, "plugs.png"))
    return paths


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
