import time

import numpy as np
import pytest

from fcs_mpc.models.allocator import (PriorityWeights, allocate_setpoints,
                                      clamp_rate, desired_rate,
                                      priority_weights, reference_setpoints)
from fcs_mpc.utils.domain import ChargingSession, ControllerWeights


def session(sid="a", t_arr=0., x=0., x_max=24., p_min=5., p_max=50.):
    return ChargingSession(sid, t_arr, x, x_max, p_min, p_max)


def uniform(n):
    return PriorityWeights(tuple(str(i) for i in range(n)), np.ones(n))


def weighted(w):
    return PriorityWeights(tuple(str(i) for i in range(len(w))),
                           np.asarray(w, dtype=float))


def objective(p, p_bar, w):
    return 0.5 * np.sum(w * (p - p_bar) ** 2, axis=-1)


def grid_oracle(p_bar, w, budget, step=0.01):
    """Brute force on the budget hyperplane sum(P) = budget"""
    n = len(p_bar)
    axes = [np.arange(0., pb + step / 2, step) for pb in p_bar[:-1]]
    if n > 1:
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes)], axis=1)
    else:
        pts = np.zeros((1, 0))
    last = budget - pts.sum(axis=1)
    ok = (last >= -1e-12) & (last <= p_bar[-1] + 1e-12)
    pts = np.column_stack([pts[ok], last[ok]])
    f = objective(pts, p_bar, w)
    return pts[np.argmin(f)], f.min()


@pytest.mark.parametrize("x,x_max,T,expected", [
    (40., 50., 3600., 10.),
    (24., 24., 60., 0.),
    (0., 24., 60., 1440.),
])
def test_desired_rate(x, x_max, T, expected):
    assert desired_rate(session(x=x, x_max=x_max), T) == pytest.approx(expected)


@pytest.mark.parametrize("rate,expected", [(1440., 50.), (2., 5.), (30., 30.)])
def test_clamp_rate(rate, expected):
    assert clamp_rate(rate, session()) == expected


def test_priority_weights_without_time_dependency():
    sessions = [session("a", 0.), session("b", 600.), session("c", 1200.)]
    prio = priority_weights(sessions, 1800., 0., 60.)
    np.testing.assert_array_equal(prio.w, np.ones(3))


def test_priority_weights_count_sampling_periods():
    prio = priority_weights([session(t_arr=0.)], 600., 3., 60.)
    assert prio.w[0] == pytest.approx(1331.)


def test_priority_weight_ratio():
    sessions = [session("a", 0.), session("b", 900.)]
    prio = priority_weights(sessions, 1200., 3., 60.)
    assert prio.w[0] / prio.w[1] == pytest.approx(42.875)


def test_priority_weights_reject_future_arrival():
    with pytest.raises(ValueError):
        priority_weights([session(t_arr=120.)], 60., 3., 60.)


def test_uniform_waterfilling():
    sp = allocate_setpoints([50., 50., 43., 22.], uniform(4), 120.)
    np.testing.assert_allclose(sp.p_bar, [38.75, 38.75, 31.75, 10.75])
    assert sp.lam == pytest.approx(11.25)


def test_weighted_waterfilling():
    sp = allocate_setpoints([50., 22.], weighted([9., 1.]), 50.)
    np.testing.assert_allclose(sp.p_bar, [47.8, 2.2])
    assert sp.lam == pytest.approx(19.8)


def test_lower_bound_becomes_active():
    sp = allocate_setpoints([50., 22.], uniform(2), 20.)
    np.testing.assert_allclose(sp.p_bar, [20., 0.])


def test_feasible_request_is_returned_unchanged():
    p = np.array([10., 20., 30.])
    sp = allocate_setpoints(p, weighted([1., 8., 27.]), 120.)
    np.testing.assert_array_equal(sp.p_bar, p)
    assert sp.lam == 0.
    again = allocate_setpoints(sp.p_bar, weighted([1., 8., 27.]), 120.)
    np.testing.assert_array_equal(again.p_bar, p)


def test_empty_session_set():
    sp = allocate_setpoints([], uniform(0), 120.)
    assert sp.p_bar.size == 0


def test_inverse_weight_law_and_ordering():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(2, 5)
        p_bar = rng.uniform(20., 50., n)
        w = rng.uniform(1., 50., n)
        budget = 0.9 * p_bar.sum()
        sp = allocate_setpoints(p_bar, weighted(w), budget)
        assert sp.p_bar.sum() <= budget + 1e-9
        free = (sp.p_bar > 1e-9) & (sp.p_bar < p_bar - 1e-9)
        scaled = w[free] * (p_bar[free] - sp.p_bar[free])
        np.testing.assert_allclose(scaled, sp.lam, rtol=1e-6)
        # Deviations sorted ascending follow weights sorted descending
        dev = p_bar - sp.p_bar
        order = np.argsort(-w)
        assert np.all(np.diff(dev[order]) >= -1e-9)


def test_raising_exponent_protects_earliest_arrival():
    sessions = [session("a", 0.), session("b", 600.), session("c", 1200.)]
    p_bar = np.array([50., 50., 50.])
    devs = []
    for e in (0., 1., 3.):
        sp = allocate_setpoints(p_bar, priority_weights(sessions, 1800., e, 60.), 100.)
        devs.append(p_bar[0] - sp.p_bar[0])
    assert devs[0] >= devs[1] >= devs[2]


def test_matches_grid_search_oracle():
    rng = np.random.default_rng(0)
    elapsed = 0.
    for _ in range(200):
        n = int(rng.integers(1, 4))
        p_bar = rng.uniform(0.5, 4., n)
        w = rng.uniform(1., 2., n)
        budget = np.round(p_bar.sum() * rng.uniform(0.3, 0.9), 2)
        start = time.time()
        sp = allocate_setpoints(p_bar, weighted(w), budget)
        elapsed += time.time() - start
        best, f_best = grid_oracle(p_bar, w, budget)
        np.testing.assert_allclose(sp.p_bar, best, atol=0.02)
        assert objective(sp.p_bar, p_bar, w) <= f_best + 1e-12
        assert sp.p_bar.sum() <= budget + 1e-9
    assert elapsed < 5.


def test_reference_setpoints_drop_completed_sessions():
    sessions = [session("full", x=24. - 1e-7), session("a", x=0., t_arr=0.),
                session("b", x=0., t_arr=0., p_max=43.)]
    weights = ControllerWeights(10., 5e6, 3e7, 10., 3., 60.)
    active, raw, sp, prio = reference_setpoints(sessions, 60., weights, 80.)
    assert [s.id for s in active] == ["a", "b"]
    np.testing.assert_allclose(raw, [50., 43.])
    assert sp.p_bar.sum() == pytest.approx(80.)
    assert sp.ids == ("a", "b")
    assert sp.as_dict() == {"a": sp.p_bar[0], "b": sp.p_bar[1]}
