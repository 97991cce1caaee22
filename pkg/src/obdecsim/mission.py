"""Per-agent sense/update/share/plan/act loop and the lockstep multi-agent driver."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Mapping, Sequence

import numpy as np
import yaml

from . import _kernels as K
from .belief import (Belief, BeliefConfig, LocalObservation, init_belief, mark_explored,
                     prune_shared_grid, update)
from .comms import Channel, ChannelConfig, Delivery, Inbox, SharedMessage, encode, integrate
from .dynamics import (Action, CameraModel, Detection, DynamicsParams, PoseNoise, UavState,
                       Velocities, detect_target, safety_check, sense_ranges, step_kinematics)
from .planner import Planner, PlannerConfig, RewardTable, observation_key
from .world import World, load_scenario, raycast_range

CONFIRM_DISTANCE = 0.5


class Strategy(str, enum.Enum):
    INDEPENDENT = "independent"
    DIVIDED = "divided"
    INFORMED = "informed"


def assign_zones(world: World, n_uavs: int) -> list[frozenset[int]]:
    """Split the grid into left-to-right column strips; wider strips go first."""
    if n_uavs < 1:
        raise ValueError("need at least one agent")
    if world.n_cells < n_uavs or world.n_cols < n_uavs:
        raise ValueError(f"cannot split {world.n_cols} grid columns ({world.n_cells} cells) "
                         f"among {n_uavs} agents")
    base, extra = divmod(world.n_cols, n_uavs)
    zones = []
    col = 0
    for i in range(n_uavs):
        width = base + (1 if i < extra else 0)
        cols = range(col, col + width)
        zones.append(frozenset(r * world.n_cols + c for r in range(world.n_rows) for c in cols))
        col += width
    return zones


def default_takeoff(world: World, n_uavs: int) -> list[tuple[float, float, float]]:
    """n points evenly spaced between the scenario's outermost take-off points."""
    pts = list(world.takeoff)
    if not pts:
        raise ValueError("scenario defines no take-off points")
    if n_uavs == len(pts):
        return pts
    first, last = pts[0], pts[-1]
    if n_uavs == 1:
        return [tuple((a + b) / 2 for a, b in zip(first, last))]
    return [tuple(a + (b - a) * i / (n_uavs - 1) for a, b in zip(first, last))
            for i in range(n_uavs)]


@dataclass(frozen=True)
class MissionConfig:
    scenario: str = "scenario-one"
    target: str | tuple[float, float, float] | None = "P1"
    n_uavs: int = 3
    takeoff: tuple[tuple[float, float, float], ...] | None = None
    strategy: Strategy = Strategy.INFORMED
    reward_option: str = "B"
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    # disturbance of the true flight (controller tracking error); the model noise
    # in dynamics.noise stays in the belief and planner.  None: truth uses the model noise
    execution_noise: PoseNoise | None = field(default_factory=lambda: PoseNoise(0.0, 0.05, 1.0))
    t_max: float = 600.0
    init_hover: float = 5.0
    confidence: float = 0.9
    # planner actions whose one-step collision chance under the belief exceeds this are
    # passed over for the next-ranked one; None disables the filter
    shield_threshold: float | None = 0.02
    shield_samples: int = 200
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.takeoff is not None and len(self.takeoff) != self.n_uavs:
            raise ValueError("n_uavs must equal the number of take-off points")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if self.n_uavs < 1:
            raise ValueError("n_uavs must be >= 1")

    def world(self) -> World:
        if isinstance(self.target, str) or self.target is None:
            return load_scenario(self.scenario, self.target)
        return load_scenario(self.scenario).with_target(self.target)

    def takeoff_points(self, world: World) -> list[tuple[float, float, float]]:
        if self.takeoff is not None:
            return [tuple(p) for p in self.takeoff]
        return default_takeoff(world, self.n_uavs)

    def replace(self, **changes) -> "MissionConfig":
        return dataclasses.replace(self, **changes)

    # -- file format -------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        d["planner"]["actions"] = [a.name for a in self.planner.actions]
        d["schema_version"] = 1
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MissionConfig":
        d = dict(d)
        version = d.pop("schema_version", 1)
        if version != 1:
            raise ValueError(f"unsupported mission schema_version {version!r}")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown mission config fields: {sorted(unknown)}")
        if "planner" in d:
            p = dict(d["planner"])
            if "actions" in p:
                p["actions"] = tuple(Action[a] if isinstance(a, str) else Action(a)
                                     for a in p["actions"])
            d["planner"] = PlannerConfig(**p)
        if "channel" in d:
            d["channel"] = ChannelConfig(**d["channel"])
        if "belief" in d:
            d["belief"] = BeliefConfig(**d["belief"])
        if "dynamics" in d:
            dyn = dict(d["dynamics"])
            if "velocities" in dyn:
                dyn["velocities"] = Velocities(**dyn["velocities"])
            if "noise" in dyn:
                dyn["noise"] = PoseNoise(**dyn["noise"])
            if "camera" in dyn:
                dyn["camera"] = CameraModel(**dyn["camera"])
            if "d_c" in dyn:
                dyn["d_c"] = tuple(dyn["d_c"])
            d["dynamics"] = DynamicsParams(**dyn)
        if d.get("execution_noise") is not None:
            d["execution_noise"] = PoseNoise(**d["execution_noise"])
        if isinstance(d.get("target"), list):
            d["target"] = tuple(float(v) for v in d["target"])
        if d.get("takeoff") is not None:
            d["takeoff"] = tuple(tuple(float(v) for v in p) for p in d["takeoff"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "MissionConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


@dataclass
class Agent:
    id: int
    state: UavState
    belief: Belief
    planner: Planner
    rng: np.random.Generator
    zone: frozenset[int] | None = None
    inbox: Inbox = field(default_factory=Inbox)
    alive: bool = True
    seq: int = 0
    last_action: Action = Action.HOVER
    last_avoid: bool = False
    last_detection: tuple[float, float] | None = None
    self_explored: set[int] = field(default_factory=set)
    trajectory: list[tuple[float, float, float, float]] = field(default_factory=list)


@dataclass
class TickResult:
    agent: int
    action: Action | None
    message: SharedMessage | None
    events: list[str]
    found: tuple[float, float] | None = None
    finder: int | None = None
    collided: bool = False
    out_of_zone: bool = False
    record: dict | None = None


@dataclass
class MissionContext:
    world: World
    cfg: MissionConfig
    strategy: Strategy
    exec_params: DynamicsParams


def shield(b: Belief, ranked: Sequence[Action], world: World, params: DynamicsParams,
           threshold: float, n: int, rng: np.random.Generator) -> tuple[Action, float]:
    """First ranked action whose sampled one-step collision chance is <= threshold.

    Poses are drawn from the belief and pushed through the model noise, so the
    check reflects the agent's own localisation uncertainty.  When every action
    is too risky the least risky one wins (rank breaks ties).
    """
    idx = rng.choice(b.n, size=n, p=b.weights)
    poses = np.ascontiguousarray(b.poses[idx])
    w = np.full(n, 1.0 / n)
    packed = params.packed()
    noise = rng.normal(0.0, 1.0, (n, 3))
    noise[:, :2] *= params.noise.flight_sigma
    noise[:, 2] *= math.radians(params.noise.yaw_sigma_deg)
    best, best_risk = ranked[0], math.inf
    for a in ranked:
        risk = K.collision_fraction(poses, w, int(a), packed, noise, world.bounds_arr,
                                    world.boxes_arr)
        if risk <= threshold:
            return a, risk
        if risk < best_risk - 1e-12:
            best, best_risk = a, risk
    return best, best_risk


def agent_tick(ag: Agent, ctx: MissionContext, deliveries: Sequence[Delivery], step: int,
               t: float, peers: Sequence[tuple[float, float, float]]) -> TickResult:
    """One decision epoch for one agent; mutates ``ag``."""
    world, cfg = ctx.world, ctx.cfg
    params = cfg.dynamics
    informed = ctx.strategy is Strategy.INFORMED
    events: list[str] = []

    # (1) sense
    ranges = sense_ranges(world, ag.state, params, peers)
    det = detect_target(world, ag.state, params.camera, ag.rng)

    # (2) integrate shared observations, (3) prune on newly confirmed cells
    peer_alt: dict[int, float] = {}
    peer_found = None
    if informed:
        res = integrate(ag.inbox, deliveries)
        peer_alt = {k: v for k, v in res.peer_altitudes.items() if k != ag.id}
        for cell, who in res.new_cells:
            if cell not in ag.belief.explored:
                prune_shared_grid(ag.belief, cell, cfg.confidence, world, who)
                events.append(f"confirmed:{cell}")
        if res.detection is not None:
            peer_found = res.detection

    # (5) ledger: cells whose centre the true footprint covers
    buf = np.empty(64, np.int64)
    tan = params.camera.half_widths(1.0)
    n_cov = K.covered_cells(world.grid_arr, ag.state.x, ag.state.y, ag.state.z, ag.state.psi,
                            tan[0], tan[1], buf)
    new_cells = sorted(int(c) for c in buf[:n_cov]
                       if int(c) not in ag.belief.explored and int(c) not in ag.self_explored)
    obs = LocalObservation(det, tuple(float(r) for r in ranges), ag.last_avoid,
                           world.cell_of((min(max(ag.state.x, world.bounds[0]), world.bounds[1]),
                                          min(max(ag.state.y, world.bounds[2]),
                                              world.bounds[3]))),
                           new_cells[0] if new_cells else None, tuple(new_cells))

    # (4) belief update with the action executed last epoch
    if not ag.last_avoid:
        ag.planner.advance(ag.last_action, observation_key(
            det.image_offset if det.seen else None, bool(new_cells), float(ranges[0]),
            params.max_range))
    else:
        ag.planner.reset()
    info = update(ag.belief, ag.last_action, obs, world, params)
    if info.recovered:
        events.append("belief-recovered")
    mark_explored(ag.belief, new_cells, ag.id)
    ag.self_explored.update(new_cells)
    if new_cells:
        events.append("explored:" + ",".join(map(str, new_cells)))

    found = None
    finder = None
    if det.seen:
        events.append("detect:{:.3f},{:.3f}".format(*det.estimated_world_position))
        if ag.last_detection is not None and math.dist(
                ag.last_detection, det.estimated_world_position) <= CONFIRM_DISTANCE:
            found = tuple((a + b) / 2 for a, b in zip(ag.last_detection,
                                                      det.estimated_world_position))
            finder = ag.id
        ag.last_detection = det.estimated_world_position
    else:
        ag.last_detection = None
    if found is None and peer_found is not None:
        found = tuple(peer_found.position)
        finder = peer_found.uav_id
    if found is not None:
        events.append("found")
        return TickResult(ag.id, None, None, events, found, finder,
                          record=_record(step, t, ag, None, None, events))

    # (6) reflex or plan
    step_dz = params.velocities.vz * params.t_f
    down = raycast_range(world, (ag.state.x, ag.state.y, ag.state.z), (0.0, 0.0, -1.0),
                         params.max_range)
    demand = safety_check(ranges, params.d_c, peer_alt, ag.state.z, own_id=ag.id,
                          z_sep=params.z_sep, step_dz=step_dz,
                          min_altitude=params.min_altitude, down_range=down,
                          back_step=params.velocities.vx * params.t_f / 2,
                          side_step=params.velocities.vy * params.t_f)
    if demand is not None:
        action = demand.action
        ag.last_avoid = True
        events.append(f"avoid:{demand.reason}")
    else:
        stats = ag.planner.plan(ag.belief, int(ag.rng.integers(0, 2 ** 63)))
        if peer_alt:
            # do not climb or descend into a band a peer has reported
            def blocked(a: Action) -> bool:
                dz = step_dz if a == Action.GO_UP else -step_dz if a == Action.GO_DOWN else 0.0
                return dz != 0.0 and any(abs(ag.state.z + dz - pz) < params.z_sep
                                         for pz in peer_alt.values())
            ranked = [a for a in stats.ranked() if not blocked(a)] or stats.ranked()
        else:
            ranked = stats.ranked()
        action = ranked[0]
        if cfg.shield_threshold is not None:
            action, risk = shield(ag.belief, ranked, world, params, cfg.shield_threshold,
                                  cfg.shield_samples, ag.rng)
            if action != ranked[0]:
                events.append(f"shield:{ranked[0].name}->{action.name}")
        ag.last_avoid = False

    # (7) share
    msg = None
    if informed:
        msg = encode(obs, sorted(ag.self_explored), ag.state, ag.seq)
        ag.seq += 1

    # (8) act
    start = ag.state
    ag.state = step_kinematics(ag.state, action, ctx.exec_params, ag.rng)
    ag.last_action = action
    ag.trajectory.append(ag.state.pose)
    res = TickResult(ag.id, action, msg, events)
    p = ag.state
    if p.z <= 0.0 or world.is_occupied((p.x, p.y, p.z)) or not K.segment_clear(
            world.boxes_arr, start.x, start.y, start.z, p.x, p.y, p.z):
        res.collided = True
        ag.alive = False
        events.append("collision")
    elif ag.zone is not None and world.cell_of((p.x, p.y)) not in ag.zone:
        res.out_of_zone = True
        events.append("out-of-zone")
    res.record = _record(step, t, ag, action, demand.reason if demand else None, events)
    return res


def _record(step, t, ag, action, avoid, events) -> dict:
    return {"step": step, "t": t, "agent": ag.id,
            "action": None if action is None else action.name, "avoid": avoid,
            "pose": list(ag.state.pose), "events": list(events)}


@dataclass
class MissionResult:
    found: bool
    finder: int | None
    time_to_find: float
    target_estimate: tuple[float, float] | None
    cells_explored: int
    coverage: float
    collisions: int
    out_of_zone: int
    proximity_violations: int
    steps: int
    trajectories: dict[int, list[tuple[float, float, float, float]]]
    events: list[dict]
    coverage_history: list[float] = field(default_factory=list)

    def event_lines(self) -> list[str]:
        return [json.dumps(e, separators=(",", ":")) for e in self.events]

    def write_event_log(self, fp: IO[str]) -> None:
        for line in self.event_lines():
            fp.write(line + "\n")

    def summary(self) -> dict:
        return {"found": self.found, "finder": self.finder, "time_to_find": self.time_to_find,
                "target_estimate": self.target_estimate, "cells_explored": self.cells_explored,
                "coverage": self.coverage, "collisions": self.collisions,
                "out_of_zone": self.out_of_zone,
                "proximity_violations": self.proximity_violations, "steps": self.steps}


def build_agents(cfg: MissionConfig, world: World) -> tuple[list[Agent], np.random.Generator]:
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_uavs + 1)
    takeoff = cfg.takeoff_points(world)
    zones = assign_zones(world, cfg.n_uavs) if cfg.strategy is Strategy.DIVIDED else None
    table = RewardTable.from_option(cfg.reward_option)
    agents = []
    for i, p in enumerate(takeoff):
        rng = np.random.default_rng(seqs[i])
        zone = zones[i] if zones else None
        belief = init_belief(world, p, cfg.dynamics.noise, cfg.belief.n_particles, rng,
                             psi=math.pi / 2, region=zone, config=cfg.belief)
        mask = None
        if zone is not None:
            mask = np.zeros(world.n_cells, np.uint8)
            mask[sorted(zone)] = 1
        planner = Planner(world, cfg.dynamics, cfg.planner, table, mask)
        state = UavState(i, p[0], p[1], p[2], math.pi / 2, cfg.init_hover)
        agents.append(Agent(i, state, belief, planner, rng, zone, trajectory=[state.pose]))
    return agents, np.random.default_rng(seqs[-1])


def run_mission(cfg: MissionConfig, world: World | None = None,
                channel_trace: IO[str] | None = None) -> MissionResult:
    """Lockstep run until a confirmed find, all agents lost, or t_max elapses."""
    world = world or cfg.world()
    agents, channel_rng = build_agents(cfg, world)
    exec_params = cfg.dynamics
    if cfg.execution_noise is not None:
        exec_params = dataclasses.replace(cfg.dynamics, noise=cfg.execution_noise)
    ctx = MissionContext(world, cfg, cfg.strategy, exec_params)
    channel = Channel(cfg.channel, world.n_cells, channel_rng, trace=channel_trace)
    ids = [a.id for a in agents]
    events: list[dict] = []
    coverage_hist: list[float] = []
    collisions = out_of_zone = proximity = 0
    found = None
    finder = None
    step = 0
    t = cfg.init_hover
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    d_h = cfg.dynamics.d_c[0]
    try:
        while t <= cfg.t_max and any(a.alive for a in agents):
            inboxes = channel.collect(step)
            live = [a for a in agents if a.alive]
            snapshot = {a.id: (a.state.x, a.state.y, a.state.z) for a in live}

            def tick(ag: Agent) -> TickResult:
                peers = [p for j, p in snapshot.items() if j != ag.id]
                return agent_tick(ag, ctx, inboxes.get(ag.id, []), step, t, peers)

            results = list(pool.map(tick, live)) if pool else [tick(a) for a in live]
            for r in results:
                events.append(r.record)
                collisions += r.collided
                out_of_zone += r.out_of_zone
                if r.found is not None and found is None:
                    found, finder = r.found, r.finder
            if found is not None:
                break
            channel.broadcast([r.message for r in results if r.message is not None], ids, step)
            live = [a for a in agents if a.alive]
            for i, a in enumerate(live):
                for b in live[i + 1:]:
                    if (math.hypot(a.state.x - b.state.x, a.state.y - b.state.y) < d_h
                            and abs(a.state.z - b.state.z) < cfg.dynamics.z_sep):
                        proximity += 1
                        events.append({"step": step, "t": t, "agent": a.id, "action": None,
                                       "avoid": None, "pose": list(a.state.pose),
                                       "events": [f"proximity:{b.id}"]})
            union = set().union(*(a.self_explored for a in agents))
            coverage_hist.append(len(union) / world.n_cells)
            step += 1
            t = cfg.init_hover + step * cfg.dynamics.t_f
    finally:
        if pool:
            pool.shutdown()
    union = set().union(*(a.self_explored for a in agents))
    # failures report the budget so that found => time_to_find <= t_max holds
    elapsed = t if found is not None else cfg.t_max
    return MissionResult(
        found=found is not None,
        finder=finder,
        time_to_find=elapsed,
        target_estimate=found,
        cells_explored=len(union),
        coverage=len(union) / world.n_cells,
        collisions=collisions,
        out_of_zone=out_of_zone,
        proximity_violations=proximity,
        steps=step,
        trajectories={a.id: list(a.trajectory) for a in agents},
        events=events,
        coverage_history=coverage_hist,
    )
