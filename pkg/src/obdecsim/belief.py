"""Weighted-particle belief over own pose and target position, plus the exploration ledger."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from . import _kernels as K
from .dynamics import Action, Detection, DynamicsParams, PoseNoise
from .world import World


@dataclass(frozen=True)
class BeliefConfig:
    n_particles: int = 500
    sigma_range: float = 0.1
    # weight of a uniform outlier term in the range model (peers, unmodelled clutter)
    range_outlier: float = 0.05
    resample_threshold: float = 0.5
    # fraction of particles whose target is re-drawn around a fresh detection
    injection_fraction: float = 0.1
    # lower bound on the prior target density at a detection, as a fraction of uniform
    density_floor: float = 0.05
    prune_scope: str = "cell"
    # jitter applied to resampled poses against particle depletion (m, degrees)
    roughen_xy: float = 0.05
    roughen_yaw_deg: float = 1.0
    # local re-seeding when even the best pose explains fewer than all five beams
    pose_reset_fraction: float = 0.1
    pose_reset_sigma: float = 1.0
    pose_reset_yaw_deg: float = 20.0
    # softness (m) of the reported-cell term; None ignores current_cell
    cell_sigma: float | None = 0.2

    def __post_init__(self):
        if self.prune_scope not in ("cell", "global"):
            raise ValueError("prune_scope must be 'cell' or 'global'")


@dataclass(frozen=True)
class LocalObservation:
    detection: Detection
    ranges: tuple[float, float, float, float, float]
    avoidance_active: bool
    current_cell: int | None
    newly_explored: int | None = None
    all_new: tuple[int, ...] = ()


@dataclass
class UpdateInfo:
    ess: float
    resampled: bool = False
    recovered: bool = False
    pose_reset: bool = False


@dataclass
class Belief:
    poses: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    rng: np.random.Generator
    explored: dict[int, int] = field(default_factory=dict)
    region: frozenset[int] | None = None
    config: BeliefConfig = field(default_factory=BeliefConfig)
    # log of the target-only evidence (detection terms) since the last resample
    target_ll: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def copy(self) -> "Belief":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return Belief(self.poses.copy(), self.targets.copy(), self.weights.copy(), rng,
                      dict(self.explored), self.region, self.config,
                      None if self.target_ll is None else self.target_ll.copy())

    def explored_mask(self, n_cells: int) -> np.ndarray:
        mask = np.zeros(n_cells, np.uint8)
        if self.explored:
            mask[list(self.explored)] = 1
        return mask

    def unexplored_cells(self, world: World) -> list[int]:
        cells = range(world.n_cells) if self.region is None else sorted(self.region)
        return [c for c in cells if c not in self.explored]

    def _normalize(self):
        self.weights /= self.weights.sum()


def init_belief(world: World, takeoff: Sequence[float], noise: PoseNoise, n: int, seed,
                *, psi: float = 0.0, region: Iterable[int] | None = None,
                config: BeliefConfig | None = None) -> Belief:
    """Pose hypotheses scattered around the take-off point, targets uniform over free ground."""
    if n < 100:
        raise ValueError("need at least 100 particles")
    if world.is_occupied(takeoff):
        raise ValueError(f"take-off point {tuple(takeoff)} is not free space")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    poses = np.empty((n, 4))
    poses[:, 0] = takeoff[0]
    poses[:, 1] = takeoff[1]
    if noise.takeoff_sigma > 0:
        poses[:, :2] += rng.normal(0.0, noise.takeoff_sigma, (n, 2))
    poses[:, 2] = takeoff[2]
    poses[:, 3] = psi
    region = frozenset(region) if region is not None else None
    targets = world.sample_free_points(rng, n, region)
    return Belief(poses, targets, np.full(n, 1.0 / n), rng, {}, region,
                  config or BeliefConfig())


def _range_loglik(pred: np.ndarray, obs: np.ndarray, cfg: BeliefConfig,
                  max_range: float) -> np.ndarray:
    sr = cfg.sigma_range
    z = (pred - obs[None, :]) / sr
    gauss = np.exp(-0.5 * z * z) / (sr * math.sqrt(2 * math.pi))
    eps = cfg.range_outlier
    lik = (1.0 - eps) * gauss + eps / max_range
    with np.errstate(divide="ignore"):
        return np.log(lik).sum(axis=1)


def _cell_loglik(poses: np.ndarray, world: World, cell: int, sigma: float) -> np.ndarray:
    """Gaussian in the distance from each pose to the reported cell (0 inside)."""
    x0, x1, y0, y1 = world.cell_rect(cell)
    dx = np.maximum(np.maximum(x0 - poses[:, 0], poses[:, 0] - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - poses[:, 1], poses[:, 1] - y1), 0.0)
    return -0.5 * (dx * dx + dy * dy) / sigma ** 2


def _target_cells(world: World, targets: np.ndarray) -> np.ndarray:
    col = np.floor((targets[:, 0] - world.bounds[0]) / world.cell_size).astype(int)
    row = np.floor((targets[:, 1] - world.bounds[2]) / world.cell_size).astype(int)
    col = np.clip(col, 0, world.n_cols - 1)
    row = np.clip(row, 0, world.n_rows - 1)
    return row * world.n_cols + col


def _free_area(world: World, cells: Iterable[int] | None = None) -> float:
    """Free ground area by exact box clipping (boxes are assumed not to overlap)."""
    cells = range(world.n_cells) if cells is None else cells
    total = 0.0
    for c in cells:
        x0, x1, y0, y1 = world.cell_rect(c)
        area = (x1 - x0) * (y1 - y0)
        for b in world.obstacles:
            w = min(x1, b.xmax) - max(x0, b.xmin)
            h = min(y1, b.ymax) - max(y0, b.ymin)
            if w > 0 and h > 0:
                area -= w * h
        total += max(area, 0.0)
    return total


def _detection_terms(b: Belief, det: Detection, params: DynamicsParams, packed: np.ndarray,
                     in_frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle log-likelihood of the detection outcome.

    Returns (full, background).  ``background`` drops the Gaussian term around a
    reported detection, i.e. it explains the report as a false positive (plus a
    miss when the particle's target is in frame); it is used for the particles
    that are not re-drawn next to the detection.
    """
    cam = params.camera
    z = b.poses[:, 2]
    pd = np.interp(z, [cam.z_near, cam.z_far], [cam.pd_near, cam.pd_far])
    pfp = cam.p_false_positive
    with np.errstate(divide="ignore"):
        log_miss = np.log1p(-pd) if np.all(pd < 1) else np.log(np.maximum(1.0 - pd, 0.0))
        if not det.seen:
            quiet = math.log1p(-pfp) if pfp < 1 else -np.inf
            full = np.where(in_frame, log_miss, quiet)
            return full, full
        ex, ey = det.estimated_world_position
        sigma = np.maximum(cam.sigma_px * z, 1e-3)
        d2 = (b.targets[:, 0] - ex) ** 2 + (b.targets[:, 1] - ey) ** 2
        log_true = np.log(pd) - math.log(2 * math.pi) - 2 * np.log(sigma) - 0.5 * d2 / sigma ** 2
        area = 4 * np.maximum(z * packed[K.P_TAN_X], 1e-9) * np.maximum(z * packed[K.P_TAN_Y],
                                                                         1e-9)
        log_fp = np.log(pfp) - np.log(area) if pfp > 0 else np.full(b.n, -np.inf)
        full = np.where(in_frame, log_true, log_fp)
        background = np.where(in_frame, log_miss + log_fp, log_fp)
        return full, background


def _inject_targets(b: Belief, det: Detection, world: World, params: DynamicsParams,
                    log_pose: np.ndarray, log_background: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, float] | None:
    """Sensor resetting: re-draw a fraction of target hypotheses next to a detection.

    The re-drawn block carries the posterior mass a true detection assigns to
    the reported point (detection probability times the prior target density of
    its cell); the rest keep their prior weight times the background
    likelihood.  Returns (log-weights, re-drawn indices, log of the injected
    mass), or None when nothing was injected.
    """
    ex, ey = det.estimated_world_position
    cfg = b.config
    m = int(math.ceil(cfg.injection_fraction * b.n))
    if m <= 0 or not world.is_free_ground(ex, ey):
        return None
    idx = b.rng.choice(b.n, size=m, replace=False)
    keep = np.ones(b.n, bool)
    keep[idx] = False
    prior = np.where(keep, b.weights, 0.0)
    prior /= prior.sum()
    cell = world.cell_of((ex, ey))
    in_cell = _target_cells(world, b.targets) == cell
    density = max(prior[in_cell].sum() / max(_free_area(world, [cell]), 1e-9),
                  cfg.density_floor / _free_area(world, b.region))
    z = float(np.mean(b.poses[idx, 2]))
    sigma = max(params.camera.sigma_px * z, 1e-3)
    pts = np.empty((0, 2))
    for _ in range(100):
        cand = np.array([ex, ey]) + b.rng.normal(0.0, sigma, (m, 2))
        ok = np.array([world.is_free_ground(px, py) for px, py in cand])
        pts = np.vstack([pts, cand[ok]])
        if len(pts) >= m:
            break
    pts = pts[:m] if len(pts) >= m else np.vstack([pts, np.tile([ex, ey], (m - len(pts), 1))])
    b.targets[idx] = pts
    mass = params.camera.detection_prob(z) * density
    pose_share = b.weights[idx] / b.weights[idx].sum()
    with np.errstate(divide="ignore"):
        logw = np.log(prior) + log_pose + log_background
        logw[idx] = math.log(mass) + np.log(pose_share) + log_pose[idx]
    return logw, idx, math.log(mass)


def _wrap(a: np.ndarray) -> np.ndarray:
    return math.pi - np.mod(math.pi - a, 2 * math.pi)


def _reset_poses(b: Belief, pred: np.ndarray, obs: np.ndarray, world: World,
                 params: DynamicsParams) -> np.ndarray | None:
    """Re-seed a block of poses around the current estimate when no particle fits.

    The trigger is that the best-fitting particle has at least one beam more
    than 3 sigma off.  Re-seeded particles keep their target and get the mean
    prior weight.  Returns their indices.
    """
    cfg = b.config
    m = int(math.ceil(cfg.pose_reset_fraction * b.n))
    if m <= 0:
        return None
    fits = (np.abs(pred - obs[None, :]) <= 3 * cfg.sigma_range).sum(axis=1)
    if fits.max() == pred.shape[1]:
        return None
    w = b.weights
    mx, my = float(w @ b.poses[:, 0]), float(w @ b.poses[:, 1])
    mpsi = math.atan2(float(w @ np.sin(b.poses[:, 3])), float(w @ np.cos(b.poses[:, 3])))
    idx = b.rng.choice(b.n, size=m, replace=False)
    z = b.poses[idx, 2]
    xs = mx + b.rng.normal(0.0, cfg.pose_reset_sigma, m)
    ys = my + b.rng.normal(0.0, cfg.pose_reset_sigma, m)
    psi = _wrap(mpsi + b.rng.normal(0.0, math.radians(cfg.pose_reset_yaw_deg), m))
    ok = np.array([not world.is_occupied((x, y, zz)) for x, y, zz in zip(xs, ys, z)])
    idx = idx[ok]
    if idx.size == 0:
        return None
    b.poses[idx, 0], b.poses[idx, 1], b.poses[idx, 3] = xs[ok], ys[ok], psi[ok]
    b.weights[idx] = 1.0 / b.n
    b._normalize()
    return idx


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def update(b: Belief, a: Action, o: LocalObservation, world: World,
           params: DynamicsParams) -> UpdateInfo:
    """Bayes filter step: predict with the transition model, weight by the observation.

    Mutates ``b``.  When every particle is ruled out, target hypotheses are
    re-drawn over unexplored free cells (poses kept) and ``recovered`` is set.
    """
    packed = params.packed()
    noise = params.noise
    raw = b.rng.normal(0.0, 1.0, (b.n, 3))
    raw[:, :2] *= noise.flight_sigma
    raw[:, 2] *= math.radians(noise.yaw_sigma_deg)
    K.batch_step(b.poses, int(a), packed, raw)

    obs = np.asarray(o.ranges, float)
    pred = K.batch_ranges(world.bounds_arr, world.boxes_arr, b.poses, params.max_range)
    log_pose = _range_loglik(pred, obs, b.config, params.max_range)
    if o.current_cell is not None and b.config.cell_sigma:
        log_pose += _cell_loglik(b.poses, world, o.current_cell, b.config.cell_sigma)
    reset = _reset_poses(b, pred, obs, world, params)
    if reset is not None:
        log_pose[reset] = _range_loglik(
            K.batch_ranges(world.bounds_arr, world.boxes_arr, b.poses[reset], params.max_range),
            obs, b.config, params.max_range)
        if o.current_cell is not None and b.config.cell_sigma:
            log_pose[reset] += _cell_loglik(b.poses[reset], world, o.current_cell,
                                            b.config.cell_sigma)
    in_frame = K.batch_in_frame(world.boxes_arr, packed, b.poses, b.targets)
    full, background = _detection_terms(b, o.detection, params, packed, in_frame)

    if b.target_ll is None:
        b.target_ll = np.zeros(b.n)
    logw = None
    if o.detection.seen and b.config.injection_fraction > 0:
        injected = _inject_targets(b, o.detection, world, params, log_pose, background)
        if injected is not None:
            logw, idx, log_mass = injected
            keep = np.ones(b.n, bool)
            keep[idx] = False
            t = np.exp(b.target_ll - np.max(b.target_ll[keep]))
            with np.errstate(divide="ignore"):
                b.target_ll = np.log(t / t[keep].sum()) + background
            b.target_ll[idx] = log_mass - math.log(idx.size)
    if logw is None:
        with np.errstate(divide="ignore"):
            logw = np.log(b.weights) + log_pose + full
        b.target_ll = b.target_ll + full

    info = UpdateInfo(ess=0.0, pose_reset=reset is not None)
    top = np.max(logw)
    if not np.isfinite(top):
        info.recovered = True
        b.targets[:] = world.sample_free_points(b.rng, b.n, b.unexplored_cells(world))
        b.weights[:] = 1.0 / b.n
        b.target_ll[:] = 0.0
    else:
        w = np.exp(logw - top)
        b.weights[:] = w / w.sum()
    info.ess = b.ess()
    if info.ess < b.config.resample_threshold * b.n:
        idx = systematic_resample(b.weights, b.rng)
        b.poses[:] = b.poses[idx]
        # targets are drawn on their own evidence: range fits say nothing about
        # the target, and coupling them lets pose resampling wipe out hypotheses
        lt = b.target_ll
        if np.isfinite(lt).any() and np.nanmax(lt) - np.min(lt) > 1e-12:
            t = np.exp(lt - np.max(lt))
            b.targets[:] = b.targets[systematic_resample(t / t.sum(), b.rng)]
        b.target_ll[:] = 0.0
        b.weights[:] = 1.0 / b.n
        info.resampled = True
        cfg = b.config
        if cfg.roughen_xy > 0 or cfg.roughen_yaw_deg > 0:
            b.poses[:, :2] += b.rng.normal(0.0, cfg.roughen_xy, (b.n, 2))
            b.poses[:, 3] = _wrap(
                b.poses[:, 3] + b.rng.normal(0.0, math.radians(cfg.roughen_yaw_deg), b.n))
    return info


def prune_shared_grid(b: Belief, cell: int, lam: float, world: World,
                      uav_id: int = -1, scope: str | None = None) -> int:
    """Relocate round(lam * k) of the k target hypotheses in a peer-explored cell.

    Relocated hypotheses are drawn uniformly over the still-unexplored free
    cells.  Returns the number of hypotheses moved.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if not 0 <= cell < world.n_cells:
        raise ValueError(f"cell {cell} out of range")
    scope = scope or b.config.prune_scope
    b.explored.setdefault(int(cell), uav_id)
    if scope == "cell":
        candidates = np.flatnonzero(_target_cells(world, b.targets) == cell)
    else:
        candidates = np.arange(b.n)
    k = candidates.size
    m = int(math.floor(lam * k + 0.5))
    if m > 0:
        chosen = b.rng.choice(candidates, size=m, replace=False)
        b.targets[chosen] = world.sample_free_points(b.rng, m, b.unexplored_cells(world))
    b._normalize()
    return m


def mark_explored(b: Belief, cells: Iterable[int], uav_id: int) -> None:
    for c in cells:
        b.explored.setdefault(int(c), uav_id)


def estimate_target(b: Belief, world: World) -> tuple[tuple[float, float], np.ndarray]:
    """Weighted mean target position and per-cell probability mass."""
    mean = b.weights @ b.targets
    hist = np.bincount(_target_cells(world, b.targets), weights=b.weights,
                       minlength=world.n_cells)
    return (float(mean[0]), float(mean[1])), hist / hist.sum()


def trace_record(step: int, b: Belief, world: World) -> dict:
    _, hist = estimate_target(b, world)
    return {"step": step, "ess": round(b.ess(), 6),
            "cell_mass": [round(float(v), 6) for v in hist]}


def write_trace(fp: IO[str], records: Iterable[dict]) -> None:
    for rec in records:
        fp.write(json.dumps(rec, separators=(",", ":")) + "\n")
