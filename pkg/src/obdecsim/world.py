"""Known indoor map: bounds, box obstacles, exploration grid and the target."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from . import _kernels as K

SCHEMA_VERSION = 1
_TILE_TOL = 1e-9


class ScenarioError(ValueError):
    """Raised when a scenario config violates a constraint."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle with its base on the floor."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    height: float
    name: str = ""

    def as_row(self) -> list[float]:
        return [self.xmin, self.xmax, self.ymin, self.ymax, 0.0, self.height]


@dataclass(frozen=True)
class TargetSpec:
    position: tuple[float, float, float]
    yaw: float = 0.0
    tag_radius: float = 0.2

    def __post_init__(self):
        if self.position[2] != 0.0:
            raise ScenarioError("target z must be 0 (target lies on the ground)")
        if not self.tag_radius > 0:
            raise ScenarioError("target tag_radius must be > 0")


@dataclass(frozen=True)
class World:
    name: str
    bounds: tuple[float, float, float, float]
    ceiling_height: float
    cell_size: float
    obstacles: tuple[Box, ...]
    target: TargetSpec
    takeoff: tuple[tuple[float, float, float], ...] = ()
    named_targets: Mapping[str, tuple[float, float, float]] = field(default_factory=dict)

    bounds_arr: np.ndarray = field(init=False, repr=False, compare=False)
    boxes_arr: np.ndarray = field(init=False, repr=False, compare=False)
    grid_arr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        xmin, xmax, ymin, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin and self.ceiling_height > 0):
            raise ScenarioError("bounds must have positive extent and ceiling_height > 0")
        if not self.cell_size > 0:
            raise ScenarioError("cell_size must be > 0")
        for extent in (xmax - xmin, ymax - ymin):
            ratio = extent / self.cell_size
            if abs(ratio - round(ratio)) > _TILE_TOL:
                raise ScenarioError(
                    f"grid does not tile bounds: extent {extent} is not a multiple of "
                    f"cell_size {self.cell_size}")
        for b in self.obstacles:
            if b.xmin < xmin or b.xmax > xmax or b.ymin < ymin or b.ymax > ymax:
                raise ScenarioError(f"obstacle {b.name or b} lies outside bounds")
            if not (b.xmax > b.xmin and b.ymax > b.ymin and b.height > 0):
                raise ScenarioError(f"obstacle {b.name or b} has non-positive extent")
        tx, ty, _ = self.target.position
        if not (xmin <= tx <= xmax and ymin <= ty <= ymax):
            raise ScenarioError("target lies outside bounds")
        object.__setattr__(self, "bounds_arr",
                           np.array([xmin, xmax, ymin, ymax, 0.0, self.ceiling_height]))
        object.__setattr__(self, "boxes_arr",
                           np.array([b.as_row() for b in self.obstacles], dtype=float)
                           .reshape(-1, 6))
        object.__setattr__(self, "grid_arr",
                           np.array([xmin, ymin, self.cell_size, self.n_cols, self.n_rows],
                                    dtype=float))
        if K.in_footprint_2d(self.boxes_arr, tx, ty):
            raise ScenarioError("target lies inside an obstacle footprint")

    # -- grid --------------------------------------------------------------

    @property
    def n_cols(self) -> int:
        return int(round((self.bounds[1] - self.bounds[0]) / self.cell_size))

    @property
    def n_rows(self) -> int:
        return int(round((self.bounds[3] - self.bounds[2]) / self.cell_size))

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    def cell_rect(self, cell: int) -> tuple[float, float, float, float]:
        row, col = divmod(int(cell), self.n_cols)
        x0 = self.bounds[0] + col * self.cell_size
        y0 = self.bounds[2] + row * self.cell_size
        return x0, x0 + self.cell_size, y0, y0 + self.cell_size

    def cell_center(self, cell: int) -> tuple[float, float]:
        x0, x1, y0, y1 = self.cell_rect(cell)
        return (x0 + x1) / 2, (y0 + y1) / 2

    def cell_column(self, cell: int) -> int:
        return int(cell) % self.n_cols

    # -- queries -----------------------------------------------------------

    def is_occupied(self, p: Sequence[float]) -> bool:
        return is_occupied(self, p)

    def cell_of(self, p: Sequence[float]) -> int:
        return cell_of(self, p)

    def is_free_ground(self, x: float, y: float) -> bool:
        xmin, xmax, ymin, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax and not K.in_footprint_2d(
            self.boxes_arr, x, y)

    def with_target(self, position: Sequence[float], yaw: float | None = None) -> "World":
        spec = TargetSpec(tuple(float(v) for v in position),
                          self.target.yaw if yaw is None else yaw, self.target.tag_radius)
        return replace(self, target=spec)

    def sample_free_points(self, rng: np.random.Generator, n: int,
                           cells: Iterable[int] | None = None) -> np.ndarray:
        """Uniform samples over free ground, optionally restricted to some cells."""
        cells = np.arange(self.n_cells) if cells is None else np.asarray(sorted(cells), int)
        if cells.size == 0:
            cells = np.arange(self.n_cells)
        out = np.empty((n, 2))
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 16)
            pick = cells[rng.integers(0, cells.size, m)]
            row, col = np.divmod(pick, self.n_cols)
            xs = self.bounds[0] + (col + rng.random(m)) * self.cell_size
            ys = self.bounds[2] + (row + rng.random(m)) * self.cell_size
            ok = ~_in_any_footprint(self.boxes_arr, xs, ys)
            take = np.flatnonzero(ok)[: n - filled]
            out[filled:filled + take.size, 0] = xs[take]
            out[filled:filled + take.size, 1] = ys[take]
            filled += take.size
        return out


def _in_any_footprint(boxes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if boxes.shape[0] == 0:
        return np.zeros(xs.shape, bool)
    inx = (xs[:, None] >= boxes[None, :, 0]) & (xs[:, None] <= boxes[None, :, 1])
    iny = (ys[:, None] >= boxes[None, :, 2]) & (ys[:, None] <= boxes[None, :, 3])
    return (inx & iny).any(axis=1)


def is_occupied(world: World, p: Sequence[float]) -> bool:
    """True iff ``p`` is outside the bounds box or inside (or on) an obstacle."""
    z = p[2] if len(p) > 2 else 0.0
    return bool(K.point_occupied(world.bounds_arr, world.boxes_arr, float(p[0]), float(p[1]),
                                 float(z)))


def cell_of(world: World, p: Sequence[float]) -> int:
    """Row-major index of the half-open cell containing ``p``."""
    x, y = float(p[0]), float(p[1])
    xmin, xmax, ymin, ymax = world.bounds
    if not (xmin <= x <= xmax and ymin <= y <= ymax):
        raise ValueError(f"point ({x}, {y}) is outside the map bounds")
    return int(K.cell_index(world.grid_arr, x, y))


def raycast_range(world: World, origin: Sequence[float], direction: Sequence[float],
                  max_range: float) -> float:
    """Exact distance along a unit ray to the first box or wall, clamped to max_range."""
    d = np.asarray(direction, float)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return float(K.raycast(world.bounds_arr, world.boxes_arr, float(origin[0]),
                           float(origin[1]), float(origin[2]), d[0], d[1], d[2],
                           float(max_range)))


# -- config loading ---------------------------------------------------------


def _require(cfg: Mapping[str, Any], key: str, where: str = "scenario") -> Any:
    if key not in cfg:
        raise ScenarioError(f"{where}: missing required field '{key}'")
    return cfg[key]


def _point(value: Any, n: int, what: str) -> tuple[float, ...]:
    try:
        pt = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ScenarioError(f"{what}: expected {n} numbers, got {value!r}") from None
    if len(pt) != n:
        raise ScenarioError(f"{what}: expected {n} numbers, got {len(pt)}")
    return pt


def validate_scenario(cfg: Mapping[str, Any]) -> None:
    """Check a scenario mapping and raise ScenarioError naming the first violation."""
    load_scenario(cfg)


def load_scenario(config: Mapping[str, Any] | str | Path, target: str | None = None) -> World:
    """Build a World from a mapping, a YAML path, or a shipped scenario name.

    ``target`` selects one of the scenario's named target points (e.g. "P1").
    """
    if isinstance(config, (str, Path)):
        config = read_scenario_file(config)
    if not isinstance(config, Mapping):
        raise ScenarioError("scenario config must be a mapping")
    version = _require(config, "schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r}")
    b = _require(config, "bounds")
    try:
        bounds = (float(b["xmin"]), float(b["xmax"]), float(b["ymin"]), float(b["ymax"]))
    except (KeyError, TypeError, ValueError):
        raise ScenarioError("bounds: need numeric xmin, xmax, ymin, ymax") from None
    obstacles = []
    for i, ob in enumerate(config.get("obstacles") or []):
        where = f"obstacles[{i}]"
        cx, cy = _point(_require(ob, "center", where), 2, f"{where}.center")
        sx, sy = _point(_require(ob, "size", where), 2, f"{where}.size")
        height = float(_require(ob, "height", where))
        obstacles.append(Box(cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, height,
                             str(ob.get("name", f"box{i}"))))
    named = {str(k): _point(v, 3, f"targets.{k}")
             for k, v in (config.get("targets") or {}).items()}
    t = _require(config, "target")
    if target is not None:
        if target not in named:
            raise ScenarioError(f"unknown target name '{target}'")
        position = named[target]
    else:
        position = _point(_require(t, "position", "target"), 3, "target.position")
    spec = TargetSpec(position, float(t.get("yaw", 0.0)), float(t.get("tag_radius", 0.2)))
    takeoff = tuple(_point(p, 3, f"takeoff[{i}]")
                    for i, p in enumerate(config.get("takeoff") or []))
    world = World(
        name=str(config.get("name", "scenario")),
        bounds=bounds,
        ceiling_height=float(_require(config, "ceiling_height")),
        cell_size=float(config.get("cell_size", 2.0)),
        obstacles=tuple(obstacles),
        target=spec,
        takeoff=takeoff,
        named_targets=named,
    )
    for i, p in enumerate(takeoff):
        if world.is_occupied(p):
            raise ScenarioError(f"takeoff[{i}] {p} is not in free space")
    for k, p in named.items():
        if not world.is_free_ground(p[0], p[1]):
            raise ScenarioError(f"target point {k} {p} is not on free ground")
    return world


def read_scenario_file(path: str | Path) -> dict:
    """Read a YAML scenario; bare names resolve to the shipped scenarios."""
    p = Path(path)
    if not p.exists() and p.suffix == "":
        ref = resources.files("obdecsim") / "scenarios" / f"{path}.yaml"
        with resources.as_file(ref) as fp:
            if not fp.exists():
                raise ScenarioError(f"no scenario file or shipped scenario named '{path}'")
            text = fp.read_text()
    else:
        text = p.read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: scenario file must contain a mapping")
    return data


def footprint_half_widths(z: float, half_angle_x_deg: float,
                          half_angle_y_deg: float) -> tuple[float, float]:
    return (z * math.tan(math.radians(half_angle_x_deg)),
            z * math.tan(math.radians(half_angle_y_deg)))
