import filecmp
import time

import numpy as np
import pytest

from fcs_mpc.models.controller import ControlMode
from fcs_mpc.simulation import World, run, run_many, step
from fcs_mpc.utils.domain import hours
from fcs_mpc.utils.evaluation import (energy_delivered, first_charging_step,
                                      grid_ramp_variation, overload_rows,
                                      relative_deviations, session_summary)
from fcs_mpc.utils.scenario import (ScenarioError, apply_overrides,
                                    load_scenario, write_logs)
from conftest import ev, make_scenario, scenario_path


def test_empty_station_keeps_storage_idle():
    logs = run(make_scenario(horizon=600.))
    assert len(logs) == 11
    for row in logs:
        assert row.sessions == {}
        assert row.p_s == 0. and row.p_g == 0.
        assert row.y == 0. and row.y_next == 0.
        assert not row.fallback


def test_row_count_and_clock(med16, med16_logs):
    assert len(med16_logs) == med16.n_steps == 121
    np.testing.assert_allclose([row.t for row in med16_logs],
                               60. * np.arange(121))


def test_standalone_invariants(med16, med16_logs):
    st = med16.storage
    for row in med16_logs:
        assert row.p_g == 0.
        assert row.p_s == pytest.approx(row.p_total, abs=1e-9)
        assert 0. <= row.y_next <= st.y_max
        assert row.p_s * (1. + st.eps_s) <= st.p_s_max + 1e-9
        assert row.p_ref_total <= med16.station.p_cs_max + 1e-9
        for s in row.sessions.values():
            assert s.p == 0. or s.p_min - 1e-9 <= s.p <= s.ref + 1e-9
        assert not row.fallback


def assert_storage_balance(logs, storage, T):
    T_h = hours(T)
    for row in logs:
        expected = T_h * (row.p_pv - (1. + storage.eps_s) * row.p_s)
        assert row.y_next - row.y == pytest.approx(expected, abs=1e-9)


def test_storage_balance_per_row(med16, med16_logs):
    assert_storage_balance(med16_logs, med16.storage, med16.weights.T)


def test_state_bookkeeping(med16, med16_logs):
    T_h = hours(med16.weights.T)
    for prev, row in zip(med16_logs, med16_logs[1:]):
        assert row.y == pytest.approx(prev.y_next, abs=1e-9)
        for sid, s in prev.sessions.items():
            assert s.x_next == pytest.approx(min(s.x_max, s.x + T_h * s.p))
            if sid in row.sessions:
                assert row.sessions[sid].x == s.x_next


def test_storage_stays_clear_of_limits(med16_logs):
    y = [row.y for row in med16_logs]
    assert min(y) >= 0.
    assert max(y) < 300.
    assert all(row.p_pv == row.p_pv_available for row in med16_logs)


def test_run_is_deterministic(med16, med16_logs, tmp_path):
    write_logs(med16_logs, str(tmp_path / "a"), scenario=med16)
    write_logs(run(med16), str(tmp_path / "b"), scenario=med16)
    for name in ("trace.csv", "summary.csv", "scenario.cfg"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name,
                           shallow=False)


def test_run_time(med16):
    start = time.time()
    run(med16)
    assert time.time() - start < 1.


def test_overload_prioritises_earlier_arrivals(med16, med16_logs):
    rows = overload_rows(med16_logs, med16.station.p_cs_max)
    assert [row.t for row in rows] == [2700., 2760.]
    for row in rows:
        dev = relative_deviations(row)
        by_arrival = sorted(row.sessions, key=lambda sid: row.sessions[sid].t_arr)
        values = [dev[sid] for sid in by_arrival]
        assert all(a < b for a, b in zip(values, values[1:]))
        assert row.p_ref_total == pytest.approx(med16.station.p_cs_max)

    first = rows[0].sessions["ev4"]
    assert first.ref == pytest.approx(5.014, abs=0.01)
    assert first.p >= first.p_min


def test_grid_mode_tracks_setpoints_exactly():
    scenario = load_scenario(scenario_path("med16_grid_d10"))
    for row in run(scenario):
        for s in row.sessions.values():
            assert s.p == s.ref
        assert row.p_g + row.p_s == pytest.approx(row.p_total, abs=1e-9)


def test_ramp_penalty_smooths_grid_power():
    fleet = [ev("a", x_max=10.)]
    loose = run(make_scenario(fleet, mode=ControlMode.GRID_CONNECTED, delta=10.))
    tight = run(make_scenario(fleet, mode=ControlMode.GRID_CONNECTED, delta=5e6))
    assert grid_ramp_variation(loose) == pytest.approx(5000., rel=0.01)
    assert grid_ramp_variation(tight) < 0.95 * grid_ramp_variation(loose)


def test_time_priority_delivers_more_to_lone_vehicle():
    base = load_scenario(scenario_path("single_ev"))
    with_priority = run(base)
    without = run(apply_overrides(base, e=0.))
    assert energy_delivered(with_priority, "ev1") > energy_delivered(without, "ev1")
    assert energy_delivered(with_priority, "ev1", 1800.) > \
        energy_delivered(without, "ev1", 1800.)
    first = first_charging_step(with_priority, "ev1")
    assert first is not None
    assert first <= first_charging_step(without, "ev1")


def test_departures_and_queue():
    fleet = [ev("a", t_arr=0., t_depart=300.), ev("b", t_arr=60.),
             ev("c", t_arr=120., t_depart=240.)]
    scenario = make_scenario(fleet, y0=20.)
    logs = run(scenario)
    by_t = {row.t: row for row in logs}

    assert set(by_t[240.].sessions) == {"a"}
    assert by_t[120.].queued == 2
    assert by_t[240.].queued == 1
    assert set(by_t[300.].sessions) == {"b"}
    assert all("c" not in row.sessions for row in logs)

    summary = session_summary(logs, scenario.fleet).set_index("ev_id")
    assert summary.loc["a", "end_reason"] == "departed"
    assert summary.loc["a", "t_end_s"] == 300.
    assert summary.loc["b", "end_reason"] == "complete"
    assert summary.loc["b", "t_plug_s"] == 300.
    assert summary.loc["c", "end_reason"] == "departed"
    assert summary.loc["c", "energy_kwh"] == 0.


def test_step_requires_matching_clock():
    world = World.from_scenario(make_scenario())
    step(world, 0.)
    assert world.t == 60.
    with pytest.raises(AssertionError):
        step(world, 0.)


def test_invalid_scenario_is_rejected():
    with pytest.raises(ScenarioError):
        run(make_scenario(y0=50.))


def test_run_many_matches_sequential_runs():
    scenarios = [make_scenario([ev("a")], horizon=600.),
                 make_scenario([ev("a"), ev("b", t_arr=60.)], plugs=(50., 50.),
                               y0=20., horizon=600.)]
    parallel = run_many(scenarios, workers=2)
    for logs, scenario in zip(parallel, scenarios):
        assert logs == run(scenario)


@pytest.mark.parametrize("name", ["med16", "med16_e0", "med16_grid_d10",
                                  "med16_grid_d5e6", "single_ev", "empty"])
def test_shipped_scenarios_solve_to_kkt_tolerance(name):
    logs = run(load_scenario(scenario_path(name)))
    assert max(row.kkt_residual for row in logs) <= 1e-8


def test_full_storage_curtails_only_surplus_pv():
    scenario = make_scenario([ev("a", x_max=10.)], y0=20., pv_level=100.)
    with pytest.warns(UserWarning, match="curtailing"):
        logs = run(scenario)

    first = logs[0]
    assert first.fallback
    assert first.p_pv_available == pytest.approx(85.)
    assert first.sessions["a"].p == pytest.approx(50., abs=1e-6)
    # 50 kW of load through the storage makes room for 55 kW of PV
    assert first.p_pv == pytest.approx(55., abs=1e-6)
    assert energy_delivered(logs, "a") == pytest.approx(10., abs=1e-6)

    assert all(row.y_next <= 20. + 1e-9 for row in logs)
    assert all(row.p_pv <= row.p_pv_available for row in logs)
    assert logs[-1].p_pv == pytest.approx(0., abs=1e-6)
    assert_storage_balance(logs, scenario.storage, scenario.weights.T)
