import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_world
from obdecsim.belief import Belief
from obdecsim.dynamics import (SEARCH_ACTIONS, Action, CameraModel, DynamicsParams, PoseNoise,
                               UavState, step_kinematics)
from obdecsim.planner import (PlannerConfig, RewardTable, StepEvent, action_cost, plan, reward,
                              root_value, simulate_step)

# transcription of the published reward table: (row, option A, option B)
TABLE = [
    ("detect_target", 300, 300),
    ("new_grid", 60, 60),
    ("hit_obstacle", -700, -350),
    ("out_of_zone", -600, -600),
    ("forward", -10, -3),
    ("turn", -10, -5),
    ("up_down", -10, -10),
    ("hover", -10, -50),
    ("avoid_lateral", 400, 400),
    ("avoid_vertical", 400, 400),
]

PERFECT = CameraModel(pd_near=1.0, pd_far=1.0, p_false_positive=0.0)
EXACT = DynamicsParams(noise=PoseNoise.zero(), camera=PERFECT)


def point_belief(pose, targets, seed=0, explored=()):
    targets = np.atleast_2d(np.asarray(targets, float))
    n = len(targets)
    b = Belief(np.tile(np.asarray(pose, float), (n, 1)), targets.copy(), np.full(n, 1.0 / n),
               np.random.default_rng(seed))
    b.explored.update({int(c): 0 for c in explored})
    return b


# -- reward table -------------------------------------------------------------


@pytest.mark.parametrize("row,a,b", TABLE)
def test_reward_table_rows(row, a, b):
    assert RewardTable.from_option("A").values[row] == a
    assert RewardTable.from_option("B").values[row] == b


def test_reward_table_has_no_extra_rows():
    for opt in "AB":
        assert set(RewardTable.from_option(opt).values) == {r for r, _, _ in TABLE}
    with pytest.raises(ValueError):
        RewardTable.from_option("C")


def test_action_costs_per_event():
    t = RewardTable.from_option("B")
    assert action_cost(Action.FORWARD, t) == -3
    assert action_cost(Action.TURN_RIGHT, t) == -5
    assert action_cost(Action.GO_DOWN, t) == -10
    assert action_cost(Action.HOVER, t) == -50
    assert action_cost(Action.BACKWARD, t, avoidance=True) == 400
    assert action_cost(Action.GO_UP, t, avoidance=True) == 400
    with pytest.raises(ValueError):
        action_cost(Action.BACKWARD, t)
    with pytest.raises(ValueError):
        action_cost(Action.HOVER, t, avoidance=True)


def test_reward_is_additive_within_a_step():
    t = RewardTable.from_option("A")
    assert reward(StepEvent(Action.HOVER, detected=True), t) == 290
    assert reward(StepEvent(Action.FORWARD, new_grids=2), t) == 110
    assert reward(StepEvent(Action.FORWARD, hit_obstacle=True), t) == -710
    assert reward(StepEvent(Action.GO_LEFT, avoidance=True), t) == 400


# -- generative model -----------------------------------------------------------


def test_sim_hover_over_target_terminates():
    w = make_world(bounds=(0.0, 4.0, 0.0, 4.0), cell=2.0, target=(1.0, 1.0, 0.0))
    done = np.ones(w.n_cells, np.uint8)
    for opt, cost in (("A", -10), ("B", -50)):
        out = simulate_step((1.0, 1.0, 1.0, 0.0), (1.0, 1.0), Action.HOVER, w,
                            RewardTable.from_option(opt), EXACT, 0, explored=done.copy())
        assert out.terminal and out.reward == 300 + cost


def test_sim_forward_into_box_is_a_hit():
    w = make_world(bounds=(0.0, 8.0, 0.0, 4.0), cell=2.0, boxes=[(4.0, 5.0, 0.0, 4.0, 3.0)],
                   target=(7.0, 1.0, 0.0))
    done = np.ones(w.n_cells, np.uint8)
    out = simulate_step((3.9, 2.0, 1.0, 0.0), (7.0, 1.0), Action.FORWARD, w,
                        RewardTable.from_option("A"), EXACT, 0, explored=done)
    assert out.terminal and out.reward == -710


def test_sim_leaving_the_volume_is_out_of_zone():
    w = make_world(bounds=(0.0, 8.0, 0.0, 4.0), cell=2.0, target=(1.0, 1.0, 0.0))
    done = np.ones(w.n_cells, np.uint8)
    out = simulate_step((7.9, 2.0, 1.0, 0.0), (1.0, 1.0), Action.FORWARD, w,
                        RewardTable.from_option("B"), EXACT, 0, explored=done)
    assert out.terminal and out.reward == -603


def test_sim_new_cell_credit_and_ledger_update():
    w = make_world(bounds=(0.0, 8.0, 0.0, 2.0), cell=2.0, target=(7.5, 1.0, 0.0))
    ledger = np.array([1, 0, 0, 0], np.uint8)
    out = simulate_step((2.2, 1.0, 0.5, 0.0), (7.5, 1.0), Action.FORWARD, w,
                        RewardTable.from_option("A"), EXACT, 0, explored=ledger)
    assert out.reward == pytest.approx(50.0) and not out.terminal
    assert list(ledger) == [1, 1, 0, 0]


def test_sim_forward_mean_displacement():
    w = make_world(bounds=(0.0, 20.0, 0.0, 20.0), cell=2.0, target=(1.0, 1.0, 0.0))
    rng = np.random.default_rng(4)
    d = np.array([simulate_step((10.0, 10.0, 1.0, 0.0), (1.0, 1.0), Action.FORWARD, w,
                                RewardTable.from_option("B"), DynamicsParams(), rng).pose[:2]
                  for _ in range(4000)]) - (10.0, 10.0)
    # sigma 0.2 over 4000 samples: standard error 0.0032
    assert d[:, 0].mean() == pytest.approx(0.8, abs=0.015)
    assert d[:, 1].mean() == pytest.approx(0.0, abs=0.015)


def test_sim_rejects_avoidance_actions():
    w = make_world()
    with pytest.raises(ValueError):
        simulate_step((1.0, 1.0, 1.0, 0.0), (0.5, 0.5), Action.BACKWARD, w,
                      RewardTable.from_option("A"), EXACT, 0)


# -- 2-step expectimax toy ----------------------------------------------------------
# One row of four 2 m cells, cell 0 already explored, target never in view.
# Forward from x=2.2 at z=0.5 reaches x=3.0, whose footprint covers the centre
# of cell 1: -10 + 60.  Every second step costs -10.
#   V(Forward) = 50 + 0.9 * (-10)          = 41
#   V(Hover)   = -10 + 0.9 * max(50, -10)  = 35


def test_two_step_root_value_matches_hand_expectimax():
    w = make_world(bounds=(0.0, 8.0, 0.0, 2.0), cell=2.0, target=(7.5, 1.0, 0.0))
    b = point_belief((2.2, 1.0, 0.5, 0.0), (7.5, 1.0), explored=[0])
    cfg = PlannerConfig(gamma=0.9, horizon=2, n_sims=400, actions=(Action.FORWARD, Action.HOVER),
                        leaf_heuristic=False)
    st_ = plan(b, cfg, RewardTable.from_option("A"), w, EXACT, 1)
    assert st_.action == Action.FORWARD
    assert abs(root_value(st_) - 41.0) < 1e-9
    hover = st_.mean_return[1]
    assert -19.0 - 1e-9 <= hover <= 35.0 + 1e-9


def test_gamma_zero_value_is_immediate_reward():
    w = make_world(bounds=(0.0, 8.0, 0.0, 2.0), cell=2.0, target=(7.5, 1.0, 0.0))
    b = point_belief((2.2, 1.0, 0.5, 0.0), (7.5, 1.0), explored=[0])
    cfg = PlannerConfig(gamma=0.0, horizon=4, n_sims=300, leaf_heuristic=False)
    st_ = plan(b, cfg, RewardTable.from_option("B"), w, EXACT, 2)
    immediate = {Action.FORWARD: 57.0, Action.TURN_LEFT: -5.0, Action.TURN_RIGHT: -5.0,
                 Action.GO_UP: -10.0, Action.GO_DOWN: -10.0, Action.HOVER: -50.0}
    for a, q, n in zip(st_.actions, st_.mean_return, st_.visits):
        if n:
            assert q == pytest.approx(immediate[a], abs=1e-9)
    assert st_.action == Action.FORWARD


# -- 3x3 shortest-path toy ------------------------------------------------------------
# Nine 1 m cells, known target at the centre of the far corner cell, zero noise,
# perfect camera.  The ledger is full, so the only positive reward is the
# detection and option A makes every step cost the same: the best plan is a
# shortest path to a pose that has the target in frame.

GRID_TARGET = (2.5, 2.5)
GRID_START = (0.5, 0.5, 1.0, 0.0)
_MOVES = {Action.FORWARD: (0.8, 0.0, 0.0), Action.GO_UP: (0.0, 0.5, 0.0),
          Action.GO_DOWN: (0.0, -0.5, 0.0), Action.TURN_LEFT: (0.0, 0.0, math.pi / 6),
          Action.TURN_RIGHT: (0.0, 0.0, -math.pi / 6), Action.HOVER: (0.0, 0.0, 0.0)}


def _grid_next(s, a):
    x, y, z, p = s
    f, dz, dp = _MOVES[a]
    return (x + f * math.cos(p), y + f * math.sin(p), z + dz, p + dp)


def _grid_sees(s):
    x, y, z, p = s
    h = z * math.tan(math.radians(30))
    dx, dy = GRID_TARGET[0] - x, GRID_TARGET[1] - y
    u = math.cos(p) * dx + math.sin(p) * dy
    v = -math.sin(p) * dx + math.cos(p) * dy
    return h > 0 and abs(u) <= h and abs(v) <= h


def _bfs_steps(s0, max_depth=10):
    if _grid_sees(s0):
        return 0
    frontier = {s0}
    for d in range(1, max_depth + 1):
        nxt = set()
        for s in frontier:
            for a in _MOVES:
                n = _grid_next(s, a)
                if not (0 <= n[0] <= 3 and 0 <= n[1] <= 3 and 0 <= n[2] <= 3):
                    continue
                if _grid_sees(n):
                    return d
                nxt.add(tuple(round(c, 9) for c in n))
        frontier = nxt
    return None


def test_grid_bfs_oracle():
    assert _bfs_steps(GRID_START) == 5  # frozen


def test_grid_toy_reaches_target_in_bfs_optimal_steps():
    w = make_world(bounds=(0.0, 3.0, 0.0, 3.0), cell=1.0, ceiling=3.0,
                   target=(*GRID_TARGET, 0.0))
    cfg = PlannerConfig(horizon=6, n_sims=5000)
    table = RewardTable.from_option("A")
    optimal = _bfs_steps(GRID_START)
    hits = 0
    for seed in range(100):
        s, k = GRID_START, 0
        while k < 3 * optimal and not _grid_sees(s):
            b = point_belief(s, [GRID_TARGET] * 50, seed, explored=range(w.n_cells))
            a = plan(b, cfg, table, w, EXACT, seed * 1000 + k).action
            n = step_kinematics(UavState(0, *s), a, EXACT)
            s, k = (n.x, n.y, n.z, n.psi), k + 1
        hits += _grid_sees(s) and k == optimal
    assert hits >= 95


# -- turning toward mass just behind the footprint ----------------------------------------
# Five 2 m cells in a row, UAV at x=7 facing +x at z=1 (footprint half-width
# 0.577 m), all target mass 0.60..0.64 m behind.  One 30 degree turn brings it
# into view (reach 0.577 / cos 30 = 0.667 m); GoUp does too but costs twice as much.

ROW = ((0.0, 10.0, 0.0, 2.0), 2.0)
TURN_POSE = (7.0, 1.0, 1.0, 0.0)


def _turn_targets():
    rng = np.random.default_rng(0)
    return np.column_stack([rng.uniform(6.36, 6.40, 40), rng.uniform(0.98, 1.02, 40)])


def _q_values(pose, targets, weights, depth, table, gamma, cam):
    """Exact belief-space expectimax Q values, zero pose noise, six search actions."""
    v = table.values
    cost = {Action.FORWARD: v["forward"], Action.TURN_LEFT: v["turn"],
            Action.TURN_RIGHT: v["turn"], Action.GO_UP: v["up_down"],
            Action.GO_DOWN: v["up_down"], Action.HOVER: v["hover"]}
    x0, x1, y0, y1 = ROW[0]
    out = {}
    for a in SEARCH_ACTIONS:
        x, y, z, p = _grid_next(pose, a)
        q = cost[a]
        if not (x0 <= x <= x1 and y0 <= y <= y1 and 0.0 <= z <= 3.0):
            out[a] = q + v["out_of_zone"]
            continue
        h = z * math.tan(math.radians(30))
        dx, dy = targets[:, 0] - x, targets[:, 1] - y
        u = math.cos(p) * dx + math.sin(p) * dy
        w = -math.sin(p) * dx + math.cos(p) * dy
        inside = (np.abs(u) <= h) & (np.abs(w) <= h) & (h > 0)
        pd = cam.detection_prob(z)
        p_det = pd * weights[inside].sum() / weights.sum()
        miss = weights * np.where(inside, 1.0 - pd, 1.0)
        q += p_det * v["detect_target"]
        if depth > 1 and miss.sum() > 0:
            q += (1 - p_det) * gamma * max(
                _q_values((x, y, z, p), targets, miss, depth - 1, table, gamma, cam).values())
        out[a] = q
    return out


def test_turn_oracle_prefers_turning():
    q = _q_values(TURN_POSE, _turn_targets(), np.ones(40), 3, RewardTable.from_option("B"),
                  0.95, CameraModel())
    best = max(q, key=q.get)
    assert best in (Action.TURN_LEFT, Action.TURN_RIGHT)
    # frozen: turning beats going up by exactly the cost difference
    assert q[Action.TURN_LEFT] == pytest.approx(293.93175, abs=1e-9)
    assert q[Action.TURN_RIGHT] == pytest.approx(293.93175, abs=1e-9)
    assert q[Action.GO_UP] == pytest.approx(288.93175, abs=1e-9)
    assert q[Action.GO_DOWN] == pytest.approx(233.4375, abs=1e-9)
    assert q[Action.HOVER] == pytest.approx(228.635, abs=1e-9)
    assert q[Action.FORWARD] == pytest.approx(-8.5575, abs=1e-9)


def test_planner_turns_toward_mass_behind():
    w = make_world(bounds=ROW[0], cell=ROW[1], target=(1.0, 1.0, 0.0))
    t = _turn_targets()
    params = DynamicsParams(noise=PoseNoise.zero())
    turns = 0
    for seed in range(50):
        b = point_belief(TURN_POSE, t, seed, explored=range(w.n_cells))
        a = plan(b, PlannerConfig(horizon=3), RewardTable.from_option("B"), w, params, seed).action
        turns += a in (Action.TURN_LEFT, Action.TURN_RIGHT)
    assert turns >= 45


# -- behaviour and contracts ------------------------------------------------------------


def _open_belief(seed):
    w = make_world(bounds=(0.0, 10.0, 0.0, 10.0), cell=2.0, target=(1.0, 1.0, 0.0))
    rng = np.random.default_rng(seed)
    t = np.column_stack([rng.uniform(0.2, 9.8, 300), rng.uniform(0.2, 9.8, 300)])
    return w, point_belief((5.0, 5.0, 1.0, 0.3), t, seed)


def test_hover_is_rarer_under_option_b():
    # nothing new within reach: the ledger is full and no target mass is nearby
    w = make_world(bounds=(0.0, 10.0, 0.0, 10.0), cell=2.0, target=(1.0, 1.0, 0.0))
    counts = {}
    for opt in "AB":
        n = 0
        for seed in range(40):
            b = point_belief((8.0, 8.0, 1.0, 0.0), [(0.5, 0.5)] * 20, seed,
                             explored=range(w.n_cells))
            st_ = plan(b, PlannerConfig(horizon=4, leaf_heuristic=False),
                       RewardTable.from_option(opt), w, EXACT, seed)
            n += st_.action == Action.HOVER
        counts[opt] = n
    assert counts["B"] < counts["A"]


def test_same_inputs_same_statistics():
    w, b = _open_belief(3)
    cfg = PlannerConfig()
    s1 = plan(b.copy(), cfg, RewardTable.from_option("B"), w, DynamicsParams(), 17)
    s2 = plan(b.copy(), cfg, RewardTable.from_option("B"), w, DynamicsParams(), 17)
    assert s1.as_dict() == s2.as_dict()
    assert np.array_equal(s1.visits, s2.visits)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31), st.sampled_from("AB"))
def test_plan_outputs_a_search_action(seed, opt):
    w, b = _open_belief(seed % 7)
    s = plan(b, PlannerConfig(n_sims=60, horizon=5), RewardTable.from_option(opt), w,
             DynamicsParams(), seed)
    assert s.action in SEARCH_ACTIONS
    assert s.visits.sum() == 60
    assert math.isfinite(root_value(s))


def test_empty_belief_is_an_error():
    w, b = _open_belief(0)
    b.weights[:] = 0.0
    with pytest.raises(ValueError, match="empty belief"):
        plan(b, PlannerConfig(n_sims=10), RewardTable.from_option("A"), w, DynamicsParams(), 0)
