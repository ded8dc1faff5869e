import os
from typing import Iterable, List, Tuple

import numpy as np
import pandas as pd


TRACE_COLUMNS = ["t_s", "y_kwh", "p_pv_kw", "p_s_kw", "p_g_kw", "p_total_kw"]
SESSION_COLUMNS = [("ref", "kw"), ("p", "kw"), ("x", "kwh")]
FLOAT_FORMAT = "%.6g"


def read_pv_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read a two-column PV profile (t_s, p_kw) and return times and raw
    power as arrays"""
    df = pd.read_csv(path)
    missing = {"t_s", "p_kw"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    df = df.sort_values("t_s")
    return df["t_s"].to_numpy(dtype=float), df["p_kw"].to_numpy(dtype=float)


def write_pv_csv(path: str, times, raw):
    df = pd.DataFrame({"t_s": np.asarray(times, dtype=float),
                       "p_kw": np.asarray(raw, dtype=float)})
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def sample_times(horizon: float, T: float) -> np.ndarray:
    n = int(round(horizon / T))
    return np.arange(n + 1, dtype=float) * T


def synthetic_pv(nominal: float, peak_s: float, width_s: float,
                 horizon: float, T: float) -> Tuple[np.ndarray, np.ndarray]:
    """Bell-shaped clear-sky PV profile sampled every T seconds.

    Args:
        nominal (float): Peak raw output in kW
        peak_s (float): Time of the peak in seconds
        width_s (float): Standard deviation of the bell in seconds
        horizon (float): Last sample time in seconds
        T (float): Sampling time in seconds

    Returns:
        times (np.ndarray), raw (np.ndarray)
    """
    times = sample_times(horizon, T)
    raw = nominal * np.exp(-0.5 * ((times - peak_s) / width_s) ** 2)
    return times, raw


def constant_pv(level: float, horizon: float,
                T: float) -> Tuple[np.ndarray, np.ndarray]:
    times = sample_times(horizon, T)
    return times, np.full(len(times), float(level))


def session_order(logs) -> List[str]:
    """Session ids in order of first appearance"""
    seen = {}
    for row in logs:
        for sid in row.sessions:
            seen.setdefault(sid, None)
    return list(seen)


def trace_frame(logs) -> pd.DataFrame:
    """One row per sampling instant. Session columns are empty while the
    session is not plugged."""
    ids = session_order(logs)
    records = []
    for row in logs:
        rec = {"t_s": row.t, "y_kwh": row.y, "p_pv_kw": row.p_pv,
               "p_s_kw": row.p_s, "p_g_kw": row.p_g,
               "p_total_kw": row.p_total}
        for sid in ids:
            s = row.sessions.get(sid)
            rec[f"ref_{sid}_kw"] = np.nan if s is None else s.ref
            rec[f"p_{sid}_kw"] = np.nan if s is None else s.p
            rec[f"x_{sid}_kwh"] = np.nan if s is None else s.x
        records.append(rec)

    columns = TRACE_COLUMNS + [f"{name}_{sid}_{unit}" for sid in ids
                               for name, unit in SESSION_COLUMNS]
    df = pd.DataFrame.from_records(records, columns=columns)
    # Adding 0.0 turns -0.0 into 0.0
    return df.astype(float) + 0.


def read_trace(path: str) -> pd.DataFrame:
    if os.path.isdir(path):
        path = os.path.join(path, "trace.csv")
    return pd.read_csv(path)


def session_ids(columns: Iterable[str]) -> List[str]:
    """Recover session ids from trace.csv column names"""
    return [c[len("p_"):-len("_kw")] for c in columns
            if c.startswith("p_") and c.endswith("_kw")
            and c not in TRACE_COLUMNS]
