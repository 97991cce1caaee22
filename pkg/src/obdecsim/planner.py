"""Online Monte-Carlo tree search over the particle belief.

Each decision samples particles from the belief, walks a UCB1 tree whose
branches are (action, discretised observation) pairs, expands one node per
simulation and scores it with a uniform-random rollout over search actions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels as K
from .belief import Belief
from .dynamics import AVOIDANCE_ACTIONS, SEARCH_ACTIONS, Action, DynamicsParams
from .world import World

REWARD_OPTIONS: dict[str, dict[str, float]] = {
    "A": {
        "detect_target": 300, "new_grid": 60, "hit_obstacle": -700, "out_of_zone": -600,
        "forward": -10, "turn": -10, "up_down": -10, "hover": -10,
        "avoid_lateral": 400, "avoid_vertical": 400,
    },
    "B": {
        "detect_target": 300, "new_grid": 60, "hit_obstacle": -350, "out_of_zone": -600,
        "forward": -3, "turn": -5, "up_down": -10, "hover": -50,
        "avoid_lateral": 400, "avoid_vertical": 400,
    },
}
_REWARD_KEYS = ("detect_target", "new_grid", "hit_obstacle", "out_of_zone", "forward", "turn",
                "up_down", "hover", "avoid_lateral", "avoid_vertical")


@dataclass(frozen=True)
class RewardTable:
    option: str
    values: Mapping[str, float]

    @classmethod
    def option_a(cls) -> "RewardTable":
        return cls.from_option("A")

    @classmethod
    def option_b(cls) -> "RewardTable":
        return cls.from_option("B")

    @classmethod
    def from_option(cls, option: str) -> "RewardTable":
        try:
            return cls(option, dict(REWARD_OPTIONS[option]))
        except KeyError:
            raise ValueError(f"unknown reward option {option!r}") from None

    def packed(self) -> np.ndarray:
        return np.array([float(self.values[k]) for k in _REWARD_KEYS])


@dataclass(frozen=True)
class StepEvent:
    """What happened in one step, as far as the reward is concerned."""

    action: Action
    detected: bool = False
    new_grids: int = 0
    hit_obstacle: bool = False
    out_of_zone: bool = False
    avoidance: bool = False


def action_cost(action: Action, table: RewardTable, avoidance: bool = False) -> float:
    v = table.values
    if avoidance:
        if action not in AVOIDANCE_ACTIONS:
            raise ValueError(f"{action.name} is not an avoidance action")
        return v["avoid_vertical"] if action in (Action.GO_UP, Action.GO_DOWN) else v[
            "avoid_lateral"]
    if action == Action.FORWARD:
        return v["forward"]
    if action in (Action.TURN_LEFT, Action.TURN_RIGHT):
        return v["turn"]
    if action in (Action.GO_UP, Action.GO_DOWN):
        return v["up_down"]
    if action == Action.HOVER:
        return v["hover"]
    raise ValueError(f"{action.name} is only rewarded as an avoidance action")


def reward(event: StepEvent, table: RewardTable) -> float:
    """Sum of the table rows triggered by one step."""
    v = table.values
    r = action_cost(event.action, table, event.avoidance)
    if event.detected:
        r += v["detect_target"]
    r += v["new_grid"] * event.new_grids
    if event.hit_obstacle:
        r += v["hit_obstacle"]
    if event.out_of_zone:
        r += v["out_of_zone"]
    return r


@dataclass(frozen=True)
class PlannerConfig:
    gamma: float = 0.95
    horizon: int = 12
    ucb_c: float = 1.2
    n_sims: int = 300
    time_budget: float | None = None
    actions: tuple[Action, ...] = SEARCH_ACTIONS
    reuse_tree: bool = True
    # model the avoidance reflex (and its table reward) inside simulations
    sim_avoidance: bool = False
    # distance-discounted value estimate where a simulation hits the depth limit
    leaf_heuristic: bool = True
    rollout_policy: str = "uniform-search-actions"
    # random rollout length after expansion, then the leaf value; None rolls
    # out to the horizon
    rollout_depth: int | None = 4

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.horizon < 1 or self.n_sims < 1:
            raise ValueError("horizon and n_sims must be >= 1")
        if not self.actions or any(a not in SEARCH_ACTIONS for a in self.actions):
            raise ValueError("planner actions must be non-empty search actions")
        if self.rollout_policy != "uniform-search-actions":
            raise ValueError(f"unknown rollout policy {self.rollout_policy!r}")
        if self.rollout_depth is not None and self.rollout_depth < 0:
            raise ValueError("rollout_depth must be >= 0")


@dataclass(frozen=True)
class SimOutcome:
    pose: tuple[float, float, float, float]
    target: tuple[float, float]
    obs_key: int
    reward: float
    terminal: bool


def as_kernel_rng(rng) -> np.ndarray:
    if isinstance(rng, np.ndarray) and rng.dtype == np.uint64 and rng.shape == (4,):
        return rng
    if isinstance(rng, np.random.Generator):
        return K.seed_state(int(rng.integers(0, 2 ** 63)))
    return K.seed_state(int(rng))


def simulate_step(pose: Sequence[float], target: Sequence[float], a: Action, world: World,
                  table: RewardTable, params: DynamicsParams, rng,
                  explored: np.ndarray | None = None, zone: np.ndarray | None = None,
                  sim_avoidance: bool = False) -> SimOutcome:
    """One step of the planner's generative model from a (pose, target) hypothesis.

    ``explored`` is the ledger mask; it is updated in place with cells newly
    covered by this step.  ``rng`` is an int seed, a numpy Generator, or a
    kernel state vector (advanced in place).
    """
    if a not in SEARCH_ACTIONS:
        raise ValueError("only search actions are planned")
    state = np.array([*pose[:4], target[0], target[1]], float)
    explored = np.zeros(world.n_cells, np.uint8) if explored is None else explored
    zone = np.ones(world.n_cells, np.uint8) if zone is None else zone
    marked = np.empty(64, np.int64)
    r, term, key, _ = K.sim_step(state, int(a), world.bounds_arr, world.boxes_arr,
                                 world.grid_arr, params.packed(sim_avoidance=sim_avoidance),
                                 table.packed(), explored, zone, marked, 0, True,
                                 as_kernel_rng(rng), np.empty(5), np.empty(64, np.int64))
    return SimOutcome(tuple(state[:4]), tuple(state[4:]), int(key), float(r), bool(term))


def observation_key(detection_offset: tuple[float, float] | None, new_cell: bool,
                    front_range: float, max_range: float) -> int:
    det = 0 if detection_offset is None else K.offset_bucket(*detection_offset)
    return int(K.obs_key(det, new_cell, K.range_bucket(front_range, max_range)))


@dataclass
class RootStats:
    action: Action
    actions: tuple[Action, ...]
    visits: np.ndarray
    mean_return: np.ndarray
    total_visits: int
    n_sims: int

    def ranked(self) -> list[Action]:
        """Actions in selection order: visits, then mean return, then index."""
        order = sorted(range(len(self.visits)),
                       key=lambda i: (-self.visits[i], -self.mean_return[i], i))
        return [self.actions[i] for i in order]

    def as_dict(self) -> dict:
        return {
            "action": self.action.name,
            "visits": {a.name: int(v) for a, v in zip(self.actions, self.visits)},
            "mean_return": {a.name: float(q) for a, q in zip(self.actions, self.mean_return)},
            "root_value": root_value(self),
        }


def root_value(stats: RootStats) -> float:
    """Mean simulated return of the chosen root action."""
    i = stats.actions.index(stats.action)
    return float(stats.mean_return[i])


@dataclass
class Planner:
    """Per-agent tree search state; keeps the subtree of the executed branch between calls."""

    world: World
    params: DynamicsParams
    config: PlannerConfig = field(default_factory=PlannerConfig)
    table: RewardTable = field(default_factory=RewardTable.option_b)
    zone: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        self._actions = np.array([int(a) for a in cfg.actions], np.int64)
        self._packed = self.params.packed(cfg.gamma, cfg.ucb_c, cfg.sim_avoidance,
                                          cfg.leaf_heuristic)
        self._rewards = self.table.packed()
        if self.zone is None:
            self.zone = np.ones(self.world.n_cells, np.uint8)
        cap = cfg.n_sims * (8 if cfg.reuse_tree else 1) + 2
        a = len(cfg.actions)
        self._tree_i = np.zeros((4, cap), np.int64)
        self._first_child = np.full((cap, a), -1, np.int64)
        self._act_n = np.zeros((cap, a), np.int64)
        self._act_sum = np.zeros((cap, a))
        self._lohi = np.zeros(2)
        self.reset()

    def reset(self) -> None:
        self._tree_i[0, 0] = 0
        self._root = K.new_node(self._tree_i, -1, -1)
        self._first_child[self._root] = -1
        self._act_n[self._root] = 0
        self._act_sum[self._root] = 0.0
        self._lohi[:] = (np.inf, -np.inf)

    def advance(self, action: Action, key: int) -> bool:
        """Re-root at the (action, observation) child; resets when it does not exist."""
        if not self.config.reuse_tree or action not in self.config.actions:
            self.reset()
            return False
        a = self.config.actions.index(action)
        child = K._find_child(self._first_child, self._tree_i, self._root, a, key)
        if child < 0:
            self.reset()
            return False
        self._root = int(child)
        return True

    def plan(self, b: Belief, seed) -> RootStats:
        if b.n == 0 or not np.isfinite(b.weights).all() or b.weights.sum() <= 0:
            raise ValueError("cannot plan from an empty belief")
        cfg = self.config
        cap = self._tree_i.shape[1]
        if cap - self._tree_i[0, 0] < cfg.n_sims + 1:
            self.reset()
        rng = as_kernel_rng(seed)
        explored = b.explored_mask(self.world.n_cells)
        cumw = np.cumsum(b.weights)
        args = (self._tree_i, self._first_child, self._act_n, self._act_sum, self._lohi,
                self._actions, b.poses, b.targets, cumw, self.world.bounds_arr,
                self.world.boxes_arr, self.world.grid_arr, self._packed, self._rewards,
                explored, self.zone, cfg.horizon,
                cfg.horizon if cfg.rollout_depth is None else cfg.rollout_depth, rng)
        done = 0
        if cfg.time_budget is None:
            K.run_simulations(self._root, cfg.n_sims, *args)
            done = cfg.n_sims
        else:
            deadline = time.perf_counter() + cfg.time_budget
            while done < cfg.n_sims and time.perf_counter() < deadline:
                chunk = min(32, cfg.n_sims - done)
                K.run_simulations(self._root, chunk, *args)
                done += chunk
        return self._root_stats(done)

    def _root_stats(self, n_sims: int) -> RootStats:
        r = self._root
        visits = self._act_n[r].copy()
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(visits > 0, self._act_sum[r] / np.maximum(visits, 1), -np.inf)
        stats = RootStats(self.config.actions[0], self.config.actions, visits, means,
                          int(self._tree_i[1, r]), n_sims)
        stats.action = stats.ranked()[0]
        return stats


def plan(b: Belief, cfg: PlannerConfig, table: RewardTable, world: World,
         params: DynamicsParams, seed, zone: np.ndarray | None = None) -> RootStats:
    """Fresh-tree planning call: a pure function of (belief, seed, config)."""
    return Planner(world, params, cfg, table, zone).plan(b, seed)
