"""UAV state, actions, noisy kinematics, simulated sensors and the safety reflex."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels as K
from .world import World


class Action(enum.IntEnum):
    FORWARD = K.FORWARD
    BACKWARD = K.BACKWARD
    GO_LEFT = K.GO_LEFT
    GO_RIGHT = K.GO_RIGHT
    GO_UP = K.GO_UP
    GO_DOWN = K.GO_DOWN
    TURN_LEFT = K.TURN_LEFT
    TURN_RIGHT = K.TURN_RIGHT
    HOVER = K.HOVER


class Category(enum.Enum):
    SEARCH = "search"
    AVOIDANCE = "avoidance"


SEARCH_ACTIONS = (Action.FORWARD, Action.GO_UP, Action.GO_DOWN, Action.TURN_LEFT,
                  Action.TURN_RIGHT, Action.HOVER)
AVOIDANCE_ACTIONS = (Action.BACKWARD, Action.GO_LEFT, Action.GO_RIGHT, Action.GO_UP,
                     Action.GO_DOWN)


def categories(action: Action) -> frozenset[Category]:
    """GoUp/GoDown belong to both; the caller's context decides which applies."""
    cats = set()
    if action in SEARCH_ACTIONS:
        cats.add(Category.SEARCH)
    if action in AVOIDANCE_ACTIONS:
        cats.add(Category.AVOIDANCE)
    return frozenset(cats)


@dataclass(frozen=True)
class Velocities:
    vx: float = 0.8
    vy: float = 0.4
    vz: float = 0.5
    vpsi_deg: float = 30.0


@dataclass(frozen=True)
class PoseNoise:
    """Gaussian pose noise: take-off x/y, per-step x/y (metres) and per-step yaw (degrees)."""

    takeoff_sigma: float = 0.5
    flight_sigma: float = 0.2
    yaw_sigma_deg: float = 5.0

    def __post_init__(self):
        if min(self.takeoff_sigma, self.flight_sigma, self.yaw_sigma_deg) < 0:
            raise ValueError("noise sigmas must be >= 0")

    @classmethod
    def zero(cls) -> "PoseNoise":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CameraModel:
    half_angle_x_deg: float = 30.0
    half_angle_y_deg: float = 30.0
    pd_near: float = 0.95
    pd_far: float = 0.5
    z_near: float = 2.0
    z_far: float = 4.0
    p_false_positive: float = 0.01
    sigma_px: float = 0.02

    def detection_prob(self, z: float) -> float:
        if z <= self.z_near:
            return self.pd_near
        if z >= self.z_far:
            return self.pd_far
        f = (z - self.z_near) / (self.z_far - self.z_near)
        return self.pd_near + f * (self.pd_far - self.pd_near)

    def half_widths(self, z: float) -> tuple[float, float]:
        return (z * math.tan(math.radians(self.half_angle_x_deg)),
                z * math.tan(math.radians(self.half_angle_y_deg)))


@dataclass(frozen=True)
class DynamicsParams:
    """Everything the transition and sensor models need besides the world."""

    velocities: Velocities = field(default_factory=Velocities)
    t_f: float = 1.0
    d_c: tuple[float, float, float] = (0.3, 0.3, 0.3)
    noise: PoseNoise = field(default_factory=PoseNoise)
    camera: CameraModel = field(default_factory=CameraModel)
    max_range: float = 4.0
    z_sep: float = 0.5
    min_altitude: float = 0.3

    def packed(self, gamma: float = 0.0, ucb_c: float = 0.0,
               sim_avoidance: bool = False, leaf_heuristic: bool = False) -> np.ndarray:
        """Flat float64 parameter vector in the kernel layout."""
        p = np.zeros(K.N_PARAMS)
        v = self.velocities
        p[K.P_VX], p[K.P_VY], p[K.P_VZ] = v.vx, v.vy, v.vz
        p[K.P_VPSI] = math.radians(v.vpsi_deg)
        p[K.P_TF] = self.t_f
        p[K.P_SIGMA_T] = self.noise.flight_sigma
        p[K.P_SIGMA_PSI] = math.radians(self.noise.yaw_sigma_deg)
        c = self.camera
        p[K.P_TAN_X] = math.tan(math.radians(c.half_angle_x_deg))
        p[K.P_TAN_Y] = math.tan(math.radians(c.half_angle_y_deg))
        p[K.P_PD_NEAR], p[K.P_PD_FAR] = c.pd_near, c.pd_far
        p[K.P_Z_NEAR], p[K.P_Z_FAR] = c.z_near, c.z_far
        p[K.P_MAX_RANGE] = self.max_range
        p[K.P_DXC], p[K.P_DYC], p[K.P_DZC] = self.d_c
        p[K.P_GAMMA] = gamma
        p[K.P_UCB_C] = ucb_c
        p[K.P_SIM_AVOID] = 1.0 if sim_avoidance else 0.0
        p[K.P_LEAF] = 1.0 if leaf_heuristic else 0.0
        return p


@dataclass(frozen=True)
class UavState:
    id: int
    x: float
    y: float
    z: float
    psi: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        if self.z < 0:
            raise ValueError("altitude must be >= 0")
        object.__setattr__(self, "psi", float(K.wrap_angle(self.psi)))

    @property
    def pose(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.psi)


@dataclass(frozen=True)
class Detection:
    seen: bool
    image_offset: tuple[float, float] | None = None
    estimated_world_position: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.seen and (self.image_offset is not None
                              or self.estimated_world_position is not None):
            raise ValueError("an unseen detection carries no offsets or position")


NOT_SEEN = Detection(False)


@dataclass(frozen=True)
class AvoidanceDemand:
    action: Action
    reason: str


def step_kinematics(s: UavState, a: Action, params: DynamicsParams,
                    rng: np.random.Generator | None = None,
                    noise: PoseNoise | None = None) -> UavState:
    """Apply one commanded action for t_f seconds plus in-flight noise.

    Altitude is never perturbed.  ``noise`` overrides ``params.noise``.
    """
    noise = params.noise if noise is None else noise
    nx = ny = npsi = 0.0
    if rng is not None and (noise.flight_sigma > 0 or noise.yaw_sigma_deg > 0):
        nx, ny, npsi = rng.normal(0.0, 1.0, 3)
        nx *= noise.flight_sigma
        ny *= noise.flight_sigma
        npsi *= math.radians(noise.yaw_sigma_deg)
    x, y, z, psi = K.step_pose(s.x, s.y, s.z, s.psi, int(a), params.packed(), nx, ny, npsi)
    z = max(z, 0.0)
    return replace(s, x=x, y=y, z=z, psi=psi, t=s.t + params.t_f)


def peer_boxes(peers: Sequence[Sequence[float]], radius: float = 0.15,
               half_height: float = 0.05) -> np.ndarray:
    """Small boxes standing in for other UAVs so the rangers can see them."""
    rows = [[p[0] - radius, p[0] + radius, p[1] - radius, p[1] + radius,
             p[2] - half_height, p[2] + half_height] for p in peers]
    return np.array(rows, float).reshape(-1, 6)


def sense_ranges(world: World, s: UavState, params: DynamicsParams | None = None,
                 peers: Sequence[Sequence[float]] = ()) -> np.ndarray:
    """Front, back, left, right, up ranges along the body axes (noiseless)."""
    max_range = params.max_range if params is not None else 4.0
    boxes = world.boxes_arr
    if len(peers):
        boxes = np.vstack([boxes, peer_boxes(peers)])
    out = np.empty(5)
    K.body_ranges(world.bounds_arr, boxes, s.x, s.y, s.z, s.psi, max_range, out)
    return out


def detect_target(world: World, s: UavState, cam: CameraModel,
                  rng: np.random.Generator) -> Detection:
    """Simulated downward camera with true/false positive rates and position noise."""
    tx, ty, _ = world.target.position
    hx, hy = cam.half_widths(s.z)
    if hx <= 0 or hy <= 0:
        return NOT_SEEN
    c, sn = math.cos(s.psi), math.sin(s.psi)
    dx, dy = tx - s.x, ty - s.y
    u = (c * dx + sn * dy) / hx
    v = (-sn * dx + c * dy) / hy
    in_frame = abs(u) <= 1 and abs(v) <= 1 and K.segment_clear(
        world.boxes_arr, s.x, s.y, s.z, tx, ty, 0.0)
    if in_frame:
        if rng.random() >= cam.detection_prob(s.z):
            return NOT_SEEN
        sigma = cam.sigma_px * s.z
        ex, ey = rng.normal(0.0, 1.0, 2) * sigma if sigma > 0 else (0.0, 0.0)
        return Detection(True, (float(u), float(v)), (tx + float(ex), ty + float(ey)))
    if cam.p_false_positive > 0 and rng.random() < cam.p_false_positive:
        u, v = rng.uniform(-1.0, 1.0, 2)
        bx, by = u * hx, v * hy
        wx = s.x + c * bx - sn * by
        wy = s.y + sn * bx + c * by
        return Detection(True, (float(u), float(v)), (float(wx), float(wy)))
    return NOT_SEEN


_RANGE_ORDER = ("front", "back", "left", "right", "up")


def safety_check(ranges: Sequence[float], d_c: Sequence[float],
                 peer_altitudes: Sequence[float] | dict = (), z: float = 0.0, *,
                 own_id: int = 0, z_sep: float = 0.5, step_dz: float = 0.5,
                 min_altitude: float = 0.3,
                 down_range: float | None = None,
                 back_step: float = 0.4, side_step: float = 0.4,
                 margin: float = 0.1) -> AvoidanceDemand | None:
    """Reflexive avoidance demand, or None when the safety zone is clear.

    Range violations come first (smallest range wins, ties in front/back/left/
    right/up order).  The escape is the move opposite the violated side; when
    that move has no room (range along it below step + margin) the next
    candidate is tried; if none has room a vertical move is used when possible.
    Altitude conflicts are resolved only against lower-id peers so that a pair
    never chases itself: ``peer_altitudes`` may be a mapping of peer id to
    altitude; a plain sequence is treated as lower-id.  ``down_range``
    (altitude above whatever is below) additionally gates GoDown so that the
    reflex never descends onto furniture.
    """
    limits = (d_c[0], d_c[0], d_c[1], d_c[1], d_c[2])
    best = None
    for k in range(5):
        if ranges[k] < limits[k] and (best is None or ranges[k] < ranges[best]):
            best = k
    can_down = z - step_dz >= min_altitude
    if down_range is not None:
        can_down = can_down and down_range - step_dz >= min_altitude
    if best is not None:
        room = {
            Action.BACKWARD: ranges[1] >= back_step + margin,
            Action.GO_LEFT: ranges[2] >= side_step + margin,
            Action.GO_RIGHT: ranges[3] >= side_step + margin,
            Action.GO_DOWN: can_down,
        }
        wide, narrow = ((Action.GO_LEFT, Action.GO_RIGHT) if ranges[2] >= ranges[3]
                        else (Action.GO_RIGHT, Action.GO_LEFT))
        candidates = {
            0: (Action.BACKWARD, wide, narrow),
            1: (wide, narrow),
            2: (Action.GO_RIGHT, Action.BACKWARD),
            3: (Action.GO_LEFT, Action.BACKWARD),
            4: (Action.GO_DOWN,),
        }[best]
        act = next((a for a in candidates if room[a]), None)
        if act is None:
            # boxed in: a vertical move keeps the horizontal position
            can_up = ranges[4] - step_dz >= limits[4]
            act = (Action.GO_DOWN if can_down and best != 4 else
                   Action.GO_UP if can_up and best != 4 else candidates[0])
        return AvoidanceDemand(act, f"range-{_RANGE_ORDER[best]}")

    if isinstance(peer_altitudes, dict):
        everyone = list(peer_altitudes.values())
        conflicts = [pz for pid, pz in sorted(peer_altitudes.items())
                     if pid < own_id and abs(pz - z) < z_sep]
    else:
        everyone = list(peer_altitudes)
        conflicts = [pz for pz in peer_altitudes if abs(pz - z) < z_sep]
    if not conflicts:
        return None
    pz = min(conflicts, key=lambda a: abs(a - z))

    def clear(nz: float) -> bool:
        # never resolve one conflict by moving into another peer's band
        return all(abs(nz - p) >= z_sep for p in everyone)

    def clear_steps(sign: int) -> int | None:
        # steps to the nearest clear level in one direction, within flyable room
        for k in range(1, 64):
            nz = z + sign * k * step_dz
            if sign > 0 and ranges[4] - k * step_dz < limits[4]:
                return None
            if sign < 0 and (nz < min_altitude
                             or down_range is not None and down_range - k * step_dz < min_altitude):
                return None
            if clear(nz):
                return k
        return None

    up, down = clear_steps(1), clear_steps(-1) if can_down else None
    if up is None and down is None:
        return None
    # an adjacent clear level wins; otherwise pass through the occupied band
    # toward the nearest clear one (the occupant has priority and stays put)
    prefer_up = z >= pz
    if down is None or up is not None and (up < down or up == down and prefer_up):
        return AvoidanceDemand(Action.GO_UP, "altitude")
    return AvoidanceDemand(Action.GO_DOWN, "altitude")
