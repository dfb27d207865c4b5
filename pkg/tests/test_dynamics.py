import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftraffic.dynamics import (
    CollisionError,
    IdmParams,
    OpenRoad,
    Ring,
    StepConfig,
    TrafficState,
    VehicleState,
    equilibrium_state,
    headway,
    headways,
    idm_acceleration,
    step,
)

P = IdmParams()
CFG = StepConfig()


def bisect_equilibrium(gap, params, iters=200):
    """Independent oracle: plain bisection on the zero-acceleration condition."""
    lo, hi = 0.0, params.v0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        acc = params.a * (1 - (mid / params.v0) ** params.delta_exp - ((params.s0 + mid * params.T) / gap) ** 2)
        if acc > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_params_validation():
    with pytest.raises(ValueError):
        IdmParams(v0=0)
    with pytest.raises(ValueError):
        IdmParams(s0=-1)
    with pytest.raises(ValueError):
        StepConfig(alpha_min=1, alpha_max=1)


def test_headway_ring_wraps():
    st_ = TrafficState([0.0, 60.0], [0.0, 0.0], Ring(90.0))
    assert headway(st_, 1, P) == pytest.approx(25.0)


def test_headway_open_road():
    st_ = TrafficState([100.0, 80.0], [0.0, 0.0], OpenRoad())
    assert headway(st_, 1, P) == pytest.approx(15.0)


def test_headway_rejects_overlap_and_front_vehicle():
    st_ = TrafficState([20.0, 20.0], [0.0, 0.0], OpenRoad())
    with pytest.raises(CollisionError):
        headway(st_, 1, P)
    with pytest.raises(ValueError):
        headway(st_, 0, P)


def test_vehicle_views_roundtrip():
    st_ = TrafficState.from_vehicles([VehicleState(10.0, 1.0), VehicleState(0.0, 2.0)])
    assert st_.vehicles[1] == VehicleState(0.0, 2.0)
    assert TrafficState.from_flat(st_.flat()) == st_


@pytest.mark.parametrize(
    "v, vl, s, expected",
    [
        (30.0, 30.0, 1e9, 0.0),
        (0.0, 0.0, 1e9, 1.0),
        (10.0, 10.0, 12.0, -1.0 / 81.0),
    ],
)
def test_idm_acceleration_values(v, vl, s, expected):
    assert idm_acceleration(v, vl, s, P) == pytest.approx(expected, abs=1e-9)


def test_idm_rejects_nonfinite():
    with pytest.raises(ValueError):
        idm_acceleration(np.nan, 1.0, 10.0, P)


def test_step_clips_negative_velocity():
    # leader far ahead but follower nearly stopped close behind a stopped car
    st_ = TrafficState([1000.0, 994.5], [0.0, 0.05], OpenRoad())
    res = step(st_, P, CFG)
    assert res.accelerations[1] * CFG.dt + 0.05 < 0
    assert res.state.v[1] == 0.0
    assert res.clipped.tolist() == [False, True]
    # position uses the pre-update velocity
    assert res.state.x[1] == pytest.approx(994.5 + 0.05 * CFG.dt)


def test_step_constant_velocity_advance():
    st_ = TrafficState([5.0], [10.0], OpenRoad(), controlled_index=0)
    res = step(st_, P, CFG, action=0.0)
    assert res.state.x[0] == pytest.approx(6.0)
    assert res.state.v[0] == pytest.approx(10.0)


def test_step_clamps_action():
    st_ = TrafficState([5.0], [10.0], OpenRoad(), controlled_index=0)
    res = step(st_, P, StepConfig(alpha_min=-3, alpha_max=3), action=5.0)
    assert res.accelerations[0] == 3.0


def test_step_action_requires_controlled_vehicle():
    st_ = TrafficState([5.0], [10.0], OpenRoad())
    with pytest.raises(ValueError):
        step(st_, P, CFG, action=1.0)


def test_step_reports_collision():
    st_ = TrafficState([10.0, 4.5], [0.0, 20.0], OpenRoad())
    res = step(st_, P, CFG)
    assert res.collision


def test_equilibrium_single_vehicle_self_following():
    st_ = equilibrium_state(1, P, Ring(50.0))
    oracle = bisect_equilibrium(50.0 - P.l, P)
    assert st_.v[0] == pytest.approx(oracle, abs=1e-10)
    assert abs(idm_acceleration(st_.v[0], st_.v[0], 50.0 - P.l, P)) < 1e-12


def test_equilibrium_matches_bisection_oracle():
    st_ = equilibrium_state(14, P, Ring(160.0))
    gap = 160.0 / 14 - P.l
    assert np.allclose(st_.v, bisect_equilibrium(gap, P), atol=1e-10)
    assert np.allclose(headways(st_, P), gap, atol=1e-9)


def test_equilibrium_infeasible():
    with pytest.raises(ValueError):
        equilibrium_state(10, P, Ring(70.0))


def test_equilibrium_is_fixed_point():
    st_ = equilibrium_state(14, P, Ring(160.0))
    worst = 0.0
    for _ in range(1000):
        nxt = step(st_, P, CFG).state
        worst = max(worst, float(np.max(np.abs(nxt.v - st_.v))))
        st_ = nxt
    assert worst < 1e-9


ring_states = st.integers(min_value=2, max_value=12).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.floats(0.5, 40.0), min_size=n, max_size=n),
        st.lists(st.floats(0.0, 30.0), min_size=n, max_size=n),
    )
)


def _ring_from(n, gaps, vels):
    gaps = np.asarray(gaps)
    L = float(np.sum(gaps + P.l))
    x = np.mod(L - np.concatenate([[0.0], np.cumsum(gaps[1:] + P.l)]), L)
    x[x >= L] = 0.0
    return TrafficState(x, vels, Ring(L))


@settings(max_examples=100, deadline=None)
@given(ring_states)
def test_ring_step_properties(data):
    n, gaps, vels = data
    st_ = _ring_from(n, gaps, vels)
    res = step(st_, P, CFG)
    nxt = res.state
    assert nxt.n == n
    assert np.all(nxt.v >= 0)
    assert np.all((nxt.x >= 0) & (nxt.x < st_.topology.length))
    again = step(st_, P, CFG)
    assert np.array_equal(again.state.x, nxt.x) and np.array_equal(again.state.v, nxt.v)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(2, 8).flatmap(
        lambda n: st.tuples(
            st.just(n),
            st.integers(1, n - 1),
            st.lists(st.floats(3.0, 40.0), min_size=n, max_size=n),
            st.lists(st.floats(0.0, 30.0), min_size=n, max_size=n),
            st.floats(-3.0, 3.0),
        )
    )
)
def test_open_road_causality(data):
    n, j, gaps, vels, bump = data
    x = 1000.0 - np.concatenate([[0.0], np.cumsum(np.asarray(gaps[1:]) + P.l)])
    base = TrafficState(x, vels)
    x2 = x.copy()
    v2 = np.asarray(vels, dtype=float).copy()
    x2[j] += min(bump, 0.0)  # never pushes j into its leader
    v2[j] = abs(v2[j] + bump)
    alt = TrafficState(x2, v2)
    a = step(base, P, CFG).state
    b = step(alt, P, CFG).state
    assert np.array_equal(a.x[:j], b.x[:j])
    assert np.array_equal(a.v[:j], b.v[:j])
