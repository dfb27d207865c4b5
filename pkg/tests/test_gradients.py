import csv
import warnings

import numpy as np
import pytest

from difftraffic.dynamics import IdmParams, OpenRoad, Ring, StepConfig, TrafficState, step
from difftraffic.gradients import (
    action_sensitivity,
    dynamics_jacobian,
    finite_difference_jacobian,
    jacobian_benchmark,
    random_interior_state,
    step_jacobian,
    write_benchmark_csv,
)
from difftraffic.rewards import FuelModel, RewardWeights, reward_grad_state

P = IdmParams()
CFG = StepConfig()


def block_mask(n, ring):
    mask = np.zeros((2 * n, 2 * n), dtype=bool)
    for i in range(n):
        mask[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = True
        if i > 0:
            mask[2 * i : 2 * i + 2, 2 * i - 2 : 2 * i] = True
    if ring and n > 1:
        mask[0:2, 2 * n - 2 :] = True
    return mask


def test_follower_partials_hand_values():
    # follower 12 m behind the leader's rear bumper, both at 10 m/s -> s* = 12
    st_ = TrafficState([100.0, 100.0 - 12.0 - P.l], [10.0, 10.0])
    jac = dynamics_jacobian(st_, P)
    assert jac.diag[1, 1, 0] == pytest.approx(-1.0 / 6.0)
    assert jac.sub[1, 1, 0] == pytest.approx(1.0 / 6.0)
    assert np.all(jac.diag[:, 0] == [0.0, 1.0])
    assert np.all(jac.sub[:, 0] == 0.0)


def test_three_vehicle_zero_pattern():
    st_ = TrafficState([100.0, 80.0, 60.0], [10.0, 12.0, 9.0])
    dense = dynamics_jacobian(st_, P).dense()
    mask = block_mask(3, ring=False)
    assert np.all(dense[~mask] == 0.0)
    assert np.all(dense[0:2, 2:] == 0.0)
    assert np.all(dense[4:6, 0:2] == 0.0)


def test_free_flow_step_block():
    st_ = TrafficState([0.0], [P.v0])
    J = step_jacobian(st_, P, CFG, [False]).dense()
    assert J[0].tolist() == [1.0, CFG.dt]
    assert J[1, 0] == 0.0
    assert J[1, 1] == pytest.approx(1 + 0.1 * (-4.0 / 30.0))


def test_step_jacobian_identity_limit():
    rng = np.random.default_rng(1)
    st_ = random_interior_state(rng, 5, "ring", P, CFG)
    J = step_jacobian(st_, P, StepConfig(dt=1e-12), np.zeros(5, bool)).dense()
    assert np.allclose(J, np.eye(10), atol=1e-9)


def test_clipped_vehicle_velocity_row_is_zero():
    st_ = TrafficState([1000.0, 994.5], [0.0, 0.05])
    res = step(st_, P, CFG)
    J = step_jacobian(st_, P, CFG, res.clipped).dense()
    assert np.all(J[3] == 0.0)
    assert J[2, 2:4].tolist() == [1.0, CFG.dt]
    fd = finite_difference_jacobian(st_, P, CFG)
    assert np.max(np.abs(J - fd)) < 1e-6


def test_clip_flag_shape_checked():
    st_ = TrafficState([10.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        step_jacobian(st_, P, CFG, [False])


@pytest.mark.parametrize("kind", ["open", "ring"])
@pytest.mark.parametrize("n", [1, 2, 10])
def test_step_jacobian_matches_fd(kind, n):
    rng = np.random.default_rng(n)
    for _ in range(10):
        st_ = random_interior_state(rng, n, kind, P, CFG)
        res = step(st_, P, CFG)
        J = step_jacobian(st_, P, CFG, res.clipped)
        fd = finite_difference_jacobian(st_, P, CFG, 1e-5)
        assert np.max(np.abs(J.dense() - fd)) <= 1e-6
        mask = block_mask(n, kind == "ring")
        assert np.all(np.abs(fd[~mask]) <= 1e-8)
        vec = rng.normal(size=2 * n)
        assert np.allclose(J.matvec(vec), J.dense() @ vec)


def test_controlled_vehicle_rows_match_fd_under_action():
    rng = np.random.default_rng(3)
    base = random_interior_state(rng, 6, "ring", P, CFG)
    st_ = TrafficState(base.x, base.v, base.topology, controlled_index=2)
    exo = np.zeros(6, bool)
    exo[2] = True
    res = step(st_, P, CFG, action=0.3)
    J = step_jacobian(st_, P, CFG, res.clipped, exogenous=exo).dense()
    fd = finite_difference_jacobian(st_, P, CFG, action=0.3)
    assert np.max(np.abs(J - fd)) <= 1e-6
    assert J[5].tolist() == [0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 0, 0]


def test_ring_corner_block():
    rng = np.random.default_rng(0)
    st_ = random_interior_state(rng, 4, "ring", P, CFG)
    dense = step_jacobian(st_, P, CFG, np.zeros(4, bool)).dense()
    assert np.any(dense[1, 6:8] != 0)
    assert np.all(dense[0:2, 2:6] == 0)


def test_fd_warns_on_tiny_h():
    st_ = TrafficState([1000.0, 980.0], [10.0, 10.0])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        finite_difference_jacobian(st_, P, CFG, h=1e-15)
    assert any("underflow" in str(w.message) for w in caught)


def test_action_sensitivity_unclipped():
    st_ = TrafficState([100.0, 80.0, 60.0], [10.0, 10.0, 10.0], OpenRoad(), controlled_index=1)
    w = RewardWeights(alpha=1.0, beta=0.0, lam=0.0)
    nxt = step(st_, P, CFG, action=0.2)
    grad = reward_grad_state(nxt.state, nxt.accelerations, w, FuelModel())
    sens = action_sensitivity(st_, P, CFG, 0.2, grad)
    expected = np.zeros(6)
    expected[3] = CFG.dt
    assert np.array_equal(sens.d_next_state_d_action, expected)
    assert sens.d_reward_d_action == pytest.approx(CFG.dt / 3)
    # vehicles ahead of the controlled one do not respond
    assert np.all(sens.d_next_state_d_action[:2] == 0)


def test_action_sensitivity_matches_fd_of_step():
    st_ = TrafficState([100.0, 80.0, 60.0], [10.0, 7.0, 10.0], OpenRoad(), controlled_index=1)
    sens = action_sensitivity(st_, P, CFG, 0.2, np.zeros(6))
    h = 1e-6
    plus = step(st_, P, CFG, action=0.2 + h).state.flat()
    minus = step(st_, P, CFG, action=0.2 - h).state.flat()
    assert np.allclose((plus - minus) / (2 * h), sens.d_next_state_d_action, atol=1e-8)


def test_action_sensitivity_clipped_is_zero():
    st_ = TrafficState([1000.0, 980.0], [10.0, 0.05], OpenRoad(), controlled_index=1)
    sens = action_sensitivity(st_, P, CFG, -1.0, np.ones(4))
    assert np.all(sens.d_next_state_d_action == 0)
    assert sens.d_reward_d_action == 0.0


def test_action_sensitivity_requires_controlled():
    st_ = TrafficState([100.0, 80.0], [10.0, 10.0])
    with pytest.raises(ValueError):
        action_sensitivity(st_, P, CFG, 0.0, np.zeros(4))


def test_benchmark_reproducible_and_faster(tmp_path):
    rep = jacobian_benchmark(20, 20, seed=3)
    assert rep.speedup > 1
    assert rep.n == 20 and rep.iters == 20
    write_benchmark_csv([rep], tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert list(rows[0].keys()) == ["n", "iters", "analytical_s", "fd_s", "speedup"]
    with pytest.raises(ValueError):
        jacobian_benchmark(1, 5)


def test_benchmark_state_stream_seeded():
    a = [random_interior_state(np.random.default_rng(7), 5, "open", P, CFG) for _ in range(2)]
    assert a[0] == a[1]


def test_analytical_cost_grows_at_most_linearly():
    import time

    ns = [10, 100, 1000]
    times = []
    for n in ns:
        st_ = random_interior_state(np.random.default_rng(0), n, "open", P, CFG)
        flags = np.zeros(n, bool)
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            for _ in range(50):
                step_jacobian(st_, P, CFG, flags)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = np.polyfit(np.log(ns), np.log(times), 1)[0]
    assert slope < 1.2
