"""Procedural 2.5D worlds, a simplified walker, rewards, and episode metrics.

World grids are anchored at the arena corner: cell (i, j) covers
x ∈ [i·res, (i+1)·res), y ∈ [j·res, (j+1)·res).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    Bvh,
    RigidTransform,
    Scene,
    build_bvh,
    cylinder_mesh,
    distance_to_scene,
    heightfield_mesh,
)

FAMILIES = ("flat", "stairs", "slope", "gap", "pillars")
GAP_FLOOR = -1.0
STANCE_HEIGHT = 0.75
FALL_ANGLE = 0.6
MAX_STEP = 0.25


class ConfigError(ValueError):
    pass


class NoTraversableCellError(ValueError):
    pass


@dataclass
class WorldConfig:
    arena_size: float = 10.0
    resolution: float = 0.1
    tile_size: float = 5.0
    families: tuple[str, ...] = ("flat",)
    stair_rise: float = 0.16
    stair_tread: float = 0.3
    stair_levels: int = 4
    slope_deg: float = 22.0
    slope_height: float = 0.6
    gap_width: float = 0.4
    pillar_density: float = 0.0
    pillar_tile_density: float = 0.5
    pillar_radius: tuple[float, float] = (0.15, 0.25)
    pillar_height: float = 1.8
    dynamic_count: int = 0
    dynamic_radius: float = 0.3
    dynamic_speed: float = 0.5
    dynamic_waypoints: int = 4
    seed: int = 0

    def validate(self):
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        if not 0 < self.slope_deg < 45:
            raise ConfigError("slope angle must lie in (0, 45) degrees")
        if not 0 < self.stair_rise < 0.3:
            raise ConfigError("stair rise must lie in (0, 0.3) m")
        if self.arena_size <= 0 or self.tile_size <= 0:
            raise ConfigError("arena and tile size must be positive")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad or not self.families:
            raise ConfigError(f"unknown terrain families {bad}")
        if self.dynamic_count < 0 or self.pillar_density < 0:
            raise ConfigError("counts and densities must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        d["pillar_radius"] = list(self.pillar_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "families" in d:
            d["families"] = tuple(d["families"])
        if "pillar_radius" in d:
            d["pillar_radius"] = tuple(d["pillar_radius"])
        return cls(**d)


@dataclass
class DynamicObstacle:
    """Cylinder looping over a closed piecewise-linear path at constant speed."""

    waypoints: np.ndarray  # (K, 2)
    speed: float
    radius: float

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        loop = np.vstack([self.waypoints, self.waypoints[:1]])
        self._seg = np.linalg.norm(np.diff(loop, axis=0), axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg)])

    @property
    def cycle_length(self) -> float:
        return float(self._cum[-1])

    def position(self, t: float) -> np.ndarray:
        if self.cycle_length <= 0 or self.speed <= 0:
            return self.waypoints[0].copy()
        s = (self.speed * t) % self.cycle_length
        k = int(np.searchsorted(self._cum, s, side="right") - 1)
        k = min(k, len(self._seg) - 1)
        a = self.waypoints[k]
        b = self.waypoints[(k + 1) % len(self.waypoints)]
        frac = 0.0 if self._seg[k] == 0 else (s - self._cum[k]) / self._seg[k]
        return a + frac * (b - a)

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "speed": self.speed, "radius": self.radius}


@dataclass
class World:
    config: WorldConfig
    elevation: np.ndarray  # (nx, ny) metres
    traversability: np.ndarray  # (nx, ny) uint8, static obstacles only
    tile_families: list[str]
    pillars: np.ndarray  # (P, 3): x, y, radius
    dynamic: list[DynamicObstacle]
    _scene: Scene | None = field(default=None, repr=False)
    _obstacle_instances: list[int] = field(default_factory=list, repr=False)
    _dynamic_instances: list[int] = field(default_factory=list, repr=False)
    _scene_time: float = field(default=0.0, repr=False)

    @property
    def resolution(self) -> float:
        return self.config.resolution

    @property
    def shape(self) -> tuple[int, int]:
        return self.elevation.shape

    # -- grid lookups --------------------------------------------------------
    def cell_of(self, xy) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64)
        return (np.floor(xy[..., 0] / self.resolution).astype(np.int64),
                np.floor(xy[..., 1] / self.resolution).astype(np.int64))

    def cell_center(self, i, j) -> np.ndarray:
        return np.stack([(np.asarray(i) + 0.5) * self.resolution, (np.asarray(j) + 0.5) * self.resolution], axis=-1)

    def in_bounds(self, i, j):
        nx, ny = self.shape
        return (i >= 0) & (i < nx) & (j >= 0) & (j < ny)

    def height_at(self, xy) -> np.ndarray:
        i, j = self.cell_of(xy)
        ok = self.in_bounds(i, j)
        out = np.zeros(np.shape(i))
        out[ok] = self.elevation[i[ok], j[ok]]
        return out if np.ndim(out) else float(out)

    def gradient_at(self, xy) -> float:
        """Elevation gradient magnitude (central differences, gap cells excluded)."""
        i, j = (int(v) for v in self.cell_of(xy))
        nx, ny = self.shape
        h = self.elevation
        if not (0 <= i < nx and 0 <= j < ny):
            return 0.0

        def at(a, b):
            a, b = min(max(a, 0), nx - 1), min(max(b, 0), ny - 1)
            return h[i, j] if h[a, b] <= GAP_FLOOR + 1e-9 else h[a, b]

        gx = (at(i + 1, j) - at(i - 1, j)) / (2 * self.resolution)
        gy = (at(i, j + 1) - at(i, j - 1)) / (2 * self.resolution)
        return float(min(math.hypot(gx, gy), 2.0))

    def is_gap(self, xy) -> bool:
        i, j = (int(v) for v in self.cell_of(xy))
        if not self.in_bounds(i, j):
            return False
        return bool(self.elevation[i, j] <= GAP_FLOOR + 1e-9)

    def dynamic_positions(self, t: float) -> np.ndarray:
        return np.array([d.position(t) for d in self.dynamic]).reshape(-1, 2)

    def traversability_at(self, t: float) -> np.ndarray:
        """Static traversability with the dynamic obstacles' footprints at time t."""
        trav = self.traversability.copy()
        if self.dynamic:
            mark_discs(trav, np.column_stack([self.dynamic_positions(t),
                                               [d.radius for d in self.dynamic]]), self.resolution)
        return trav

    def robot_centric(self, xy, yaw: float, size: int, cell: float, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Traversability and relative elevation on a yaw-aligned grid centred on ``xy``.

        Grid index i runs forward, j runs left; each cell takes the world cell under
        its centre. Off-arena cells are untraversable.
        """
        c = (np.arange(size) - size / 2 + 0.5) * cell
        fx, ly = np.meshgrid(c, c, indexing="ij")
        cs, sn = math.cos(yaw), math.sin(yaw)
        wx = xy[0] + cs * fx - sn * ly
        wy = xy[1] + sn * fx + cs * ly
        i = np.floor(wx / self.resolution).astype(np.int64)
        j = np.floor(wy / self.resolution).astype(np.int64)
        inside = self.in_bounds(i, j)
        ic, jc = np.clip(i, 0, self.shape[0] - 1), np.clip(j, 0, self.shape[1] - 1)
        trav = np.where(inside, self.traversability_at(t)[ic, jc], 0).astype(np.float64)
        elev = np.where(inside, self.elevation[ic, jc] - self.height_at(np.asarray(xy)), 0.0)
        return trav, elev

    # -- geometry --------------------------------------------------------------
    def scene(self, t: float | None = None) -> Scene:
        """Raycast scene; with ``t`` given, dynamic obstacles are moved to time t."""
        if self._scene is None:
            self._build_scene()
        if self.dynamic and t is not None and t != self._scene_time:
            self._move_dynamic(t)
        return self._scene

    @property
    def obstacle_instances(self) -> list[int]:
        self.scene()
        return list(self._obstacle_instances)

    def _build_scene(self):
        terrain = heightfield_mesh(self.elevation, self.resolution, mesh_id=0)
        entries: list[tuple[Bvh, RigidTransform]] = [(build_bvh(terrain), RigidTransform())]
        obstacle_ids = []
        cache: dict[float, Bvh] = {}
        for k, (x, y, r) in enumerate(self.pillars):
            key = round(float(r), 6)
            if key not in cache:
                cache[key] = build_bvh(cylinder_mesh(r, self.config.pillar_height + 1.0, mesh_id=1))
            z0 = self.height_at(np.array([x, y])) - 1.0
            obstacle_ids.append(len(entries))
            entries.append((cache[key], RigidTransform(translation=[x, y, z0])))
        dyn_ids = []
        for d in self.dynamic:
            bvh = build_bvh(cylinder_mesh(d.radius, 2.5, mesh_id=2))
            p = d.position(0.0)
            obstacle_ids.append(len(entries))
            dyn_ids.append(len(entries))
            entries.append((bvh, RigidTransform(translation=[p[0], p[1], -1.2])))
        self._scene = Scene(entries)
        self._obstacle_instances = obstacle_ids
        self._dynamic_instances = dyn_ids
        self._scene_time = 0.0

    def _move_dynamic(self, t: float):
        for k, d in zip(self._dynamic_instances, self.dynamic):
            p = d.position(t)
            self._scene.set_transform(k, RigidTransform(translation=[p[0], p[1], -1.2]))
        self._scene_time = t

    def obstacle_schedule(self) -> dict:
        return {"pillars": self.pillars.tolist(), "dynamic": [d.to_dict() for d in self.dynamic]}

    def to_json(self) -> str:
        return json.dumps({"config": self.config.to_dict(), "tiles": self.tile_families,
                           "schedule": self.obstacle_schedule()})


def mark_discs(trav: np.ndarray, discs: np.ndarray, res: float):
    """Zero every cell whose centre lies within a disc, plus the cell containing the centre."""
    nx, ny = trav.shape
    for x, y, r in discs:
        i0, i1 = int(np.floor((x - r) / res)), int(np.floor((x + r) / res))
        j0, j1 = int(np.floor((y - r) / res)), int(np.floor((y + r) / res))
        ii, jj = np.meshgrid(np.arange(max(i0, 0), min(i1, nx - 1) + 1),
                             np.arange(max(j0, 0), min(j1, ny - 1) + 1), indexing="ij")
        cx, cy = (ii + 0.5) * res, (jj + 0.5) * res
        inside = (cx - x) ** 2 + (cy - y) ** 2 <= r * r
        trav[ii[inside], jj[inside]] = 0
        ci, cj = int(np.floor(x / res)), int(np.floor(y / res))
        if 0 <= ci < nx and 0 <= cj < ny:
            trav[ci, cj] = 0


def _tile_heights(family: str, n: int, res: float, cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    h = np.zeros((n, n))
    centers = (np.arange(n) + 0.5) * res
    margin = 0.5
    # distance inward from the tile margin (chebyshev), for pyramid shapes
    dx = np.minimum(centers, n * res - centers)
    inward = np.minimum(dx[:, None], dx[None, :]) - margin
    if family == "stairs":
        level = np.clip(np.floor(inward / cfg.stair_tread) + 1, 0, cfg.stair_levels)
        h = np.where(inward >= 0, level * cfg.stair_rise, 0.0)
    elif family == "slope":
        h = np.clip(np.tan(np.radians(cfg.slope_deg)) * np.maximum(inward, 0.0), 0.0, cfg.slope_height)
        h = np.round(h, 9)
    elif family == "gap":
        w = max(int(round(cfg.gap_width / res)), 1)
        span_lo, span_hi = int(round(1.0 / res)), n - int(round(1.0 / res))
        pos = int(rng.integers(int(round(1.5 / res)), n - int(round(1.5 / res)) - w))
        if rng.random() < 0.5:
            h[pos:pos + w, span_lo:span_hi] = GAP_FLOOR
        else:
            h[span_lo:span_hi, pos:pos + w] = GAP_FLOOR
    return h


def generate_world(config: WorldConfig) -> World:
    """Deterministic world for ``config.seed``: terrain tiles, pillars, dynamic obstacles."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    res = config.resolution
    n = int(round(config.arena_size / res))
    tile_n = int(round(config.tile_size / res))
    tiles_per_side = max(n // tile_n, 1)
    elevation = np.zeros((n, n))
    families: list[str] = []
    for ti in range(tiles_per_side):
        for tj in range(tiles_per_side):
            fam = config.families[int(rng.integers(len(config.families)))]
            families.append(fam)
            sl = (slice(ti * tile_n, (ti + 1) * tile_n), slice(tj * tile_n, (tj + 1) * tile_n))
            elevation[sl] = _tile_heights(fam, tile_n, res, config, rng)

    trav = np.ones((n, n), dtype=np.uint8)
    trav[elevation <= GAP_FLOOR + 1e-9] = 0
    # cliffs between neighbours higher than a step are not traversable
    dz = np.zeros_like(elevation)
    dz[:-1] = np.maximum(dz[:-1], np.abs(np.diff(elevation, axis=0)))
    dz[1:] = np.maximum(dz[1:], np.abs(np.diff(elevation, axis=0)))
    dz[:, :-1] = np.maximum(dz[:, :-1], np.abs(np.diff(elevation, axis=1)))
    dz[:, 1:] = np.maximum(dz[:, 1:], np.abs(np.diff(elevation, axis=1)))
    trav[dz > MAX_STEP] = 0

    pillars = []
    area = config.arena_size ** 2
    count = rng.poisson(config.pillar_density * area) if config.pillar_density > 0 else 0
    for _ in range(count):
        x, y = rng.uniform(0.3, config.arena_size - 0.3, size=2)
        pillars.append([x, y, rng.uniform(*config.pillar_radius)])
    for idx, fam in enumerate(families):
        if fam != "pillars":
            continue
        ti, tj = divmod(idx, tiles_per_side)
        k = rng.poisson(config.pillar_tile_density * config.tile_size ** 2)
        for _ in range(k):
            x = ti * config.tile_size + rng.uniform(0.3, config.tile_size - 0.3)
            y = tj * config.tile_size + rng.uniform(0.3, config.tile_size - 0.3)
            pillars.append([x, y, rng.uniform(*config.pillar_radius)])
    pillars = np.array(pillars).reshape(-1, 3)
    mark_discs(trav, pillars, res)

    dynamic = []
    for _ in range(config.dynamic_count):
        wps = rng.uniform(0.5, config.arena_size - 0.5, size=(config.dynamic_waypoints, 2))
        dynamic.append(DynamicObstacle(wps, config.dynamic_speed, config.dynamic_radius))
    return World(config, elevation, trav, families, pillars, dynamic)


def project_goal(goal, robot_xy, trav: np.ndarray, resolution: float) -> np.ndarray:
    """Move a goal off non-traversable cells.

    Unchanged if its cell is traversable; otherwise the first traversable cell
    centre met when walking from the goal toward the robot in quarter-cell
    steps; otherwise the globally nearest traversable cell centre.
    """
    goal = np.asarray(goal, dtype=np.float64).copy()
    if not trav.any():
        raise NoTraversableCellError("map has no traversable cell")
    nx, ny = trav.shape

    def ok(p):
        i, j = int(np.floor(p[0] / resolution)), int(np.floor(p[1] / resolution))
        return 0 <= i < nx and 0 <= j < ny and trav[i, j], (i, j)

    good, _ = ok(goal[:2])
    if good:
        return goal
    robot_xy = np.asarray(robot_xy, dtype=np.float64)[:2]
    seg = robot_xy - goal[:2]
    length = float(np.linalg.norm(seg))
    steps = int(np.ceil(length / (resolution / 4))) if length > 0 else 0
    for s in range(1, steps + 1):
        p = goal[:2] + seg * (s / steps)
        good, (i, j) = ok(p)
        if good:
            goal[:2] = [(i + 0.5) * resolution, (j + 0.5) * resolution]
            return goal
    ii, jj = np.nonzero(trav)
    d2 = ((ii + 0.5) * resolution - goal[0]) ** 2 + ((jj + 0.5) * resolution - goal[1]) ** 2
    k = int(np.argmin(d2))
    goal[:2] = [(ii[k] + 0.5) * resolution, (jj[k] + 0.5) * resolution]
    return goal


# -- walker --------------------------------------------------------------------

@dataclass
class WalkerParams:
    tau_v: float = 0.15
    v_bounds: tuple[float, float, float] = (1.0, 0.4, 1.2)  # |vx| (fwd), |vy|, |yaw rate|
    v_back: float = 0.3
    stiffness: float = 40.0
    damping: float = 6.0
    gait_gain: float = 1.0
    terrain_gain: float = 4.0
    step_gain: float = 12.0
    capsule_radius: float = 0.2
    capsule_heights: tuple[float, ...] = (0.3, 0.7, 1.1)
    fall_angle: float = FALL_ANGLE
    max_collisions: int = 5


@dataclass
class Action:
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.yaw_rate])

    @classmethod
    def from_array(cls, a) -> "Action":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def clamped(self, p: WalkerParams) -> "Action":
        return Action(float(np.clip(self.vx, -p.v_back, p.v_bounds[0])),
                      float(np.clip(self.vy, -p.v_bounds[1], p.v_bounds[1])),
                      float(np.clip(self.yaw_rate, -p.v_bounds[2], p.v_bounds[2])))


@dataclass
class WalkerState:
    x: float
    y: float
    z: float
    yaw: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0  # vertical body speed from terrain following
    wx: float = 0.0  # roll rate
    wy: float = 0.0  # pitch rate
    wyaw: float = 0.0
    prev_action: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0
    in_contact: bool = False

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def pose(self) -> RigidTransform:
        """Body pose at ground level, yaw only (roll/pitch handled by sensor mounts)."""
        return RigidTransform.from_euler(0.0, 0.0, self.yaw, [self.x, self.y, self.z - STANCE_HEIGHT])

    def copy(self) -> "WalkerState":
        s = WalkerState(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        s.prev_action = self.prev_action.copy()
        return s

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.yaw, self.roll, self.pitch, self.vx, self.vy, self.vz,
                self.wx, self.wy, self.wyaw, *map(float, self.prev_action), self.t]


def spawn(world: World, xy, yaw: float = 0.0) -> WalkerState:
    xy = np.asarray(xy, dtype=np.float64)
    return WalkerState(float(xy[0]), float(xy[1]), world.height_at(xy) + STANCE_HEIGHT, yaw)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def _collision_distance(world: World, state: WalkerState, xy, t: float, params: WalkerParams) -> float:
    if not len(world.pillars) and not world.dynamic:
        return np.inf
    ground = world.height_at(xy)
    pts = np.array([[xy[0], xy[1], ground + h] for h in params.capsule_heights])
    scene = world.scene(t)
    return float(distance_to_scene(scene, pts, world.obstacle_instances, cutoff=1.0).min())


def step(state: WalkerState, action: Action, world: World, dt: float, rng: np.random.Generator,
         params: WalkerParams | None = None) -> tuple[WalkerState, dict]:
    """Advance the walker by dt. Returns the new state and an events dict."""
    if not 0 < dt <= 0.1:
        raise ValueError(f"dt must lie in (0, 0.1], got {dt}")
    p = params or WalkerParams()
    a = action.clamped(p)
    s = state.copy()
    alpha = 1.0 if p.tau_v <= 0 else 1.0 - math.exp(-dt / p.tau_v)
    s.vx += alpha * (a.vx - s.vx)
    s.vy += alpha * (a.vy - s.vy)
    s.wyaw += alpha * (a.yaw_rate - s.wyaw)
    c, sn = math.cos(state.yaw), math.sin(state.yaw)
    new_xy = np.array([s.x + (c * s.vx - sn * s.vy) * dt, s.y + (sn * s.vx + c * s.vy) * dt])
    s.yaw = float(wrap_angle(s.yaw + s.wyaw * dt))
    s.t = state.t + dt

    events = {"collision": False, "fall": False, "contact": False}
    dist = _collision_distance(world, s, new_xy, s.t, p)
    if dist < p.capsule_radius:
        # blocked: stay put, velocities zeroed
        events["contact"] = True
        events["collision"] = not state.in_contact
        new_xy = np.array([state.x, state.y])
        s.vx = s.vy = 0.0
    s.in_contact = events["contact"]

    old_ground = world.height_at(np.array([state.x, state.y]))
    s.x, s.y = float(new_xy[0]), float(new_xy[1])
    ground = world.height_at(new_xy)
    s.z = ground + STANCE_HEIGHT
    s.vz = (s.z - state.z) / dt

    speed = math.hypot(s.vx, s.vy)
    grad = world.gradient_at(new_xy)
    step_h = abs(ground - old_ground) if ground > GAP_FLOOR + 1e-9 else 0.0
    excite = p.gait_gain * speed + p.terrain_gain * grad * speed + p.step_gain * step_h
    noise = rng.normal(size=2)
    for ang, rate, k in (("roll", "wx", 0), ("pitch", "wy", 1)):
        acc = -p.stiffness * getattr(s, ang) - p.damping * getattr(s, rate) + excite * noise[k] / math.sqrt(dt)
        setattr(s, rate, getattr(s, rate) + dt * acc)
        setattr(s, ang, getattr(s, ang) + dt * getattr(s, rate))
    s.prev_action = a.as_array()
    if world.is_gap(new_xy) or abs(s.roll) > p.fall_angle or abs(s.pitch) > p.fall_angle:
        events["fall"] = True
    return s, events


# -- command, rewards, stability -------------------------------------------------

@dataclass
class NavigationCommand:
    p_xy: np.ndarray
    e_yaw: float
    remaining: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_xy[0], self.p_xy[1], self.e_yaw, self.remaining])


def navigation_command(state: WalkerState, goal, t_max: float) -> NavigationCommand:
    d = np.asarray(goal, dtype=np.float64)[:2] - state.xy
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    p = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])
    return NavigationCommand(p, float(wrap_angle(math.atan2(p[1], p[0]))), max(t_max - state.t, 0.0))


def reward_task(p_xy, t: float, t_max: float, t_r: float) -> float:
    if t_r <= 0:
        raise ValueError("t_r must be positive")
    p = np.asarray(p_xy, dtype=np.float64)
    active = 1.0 if t > t_max - t_r else 0.0
    return float(1.0 / (1.0 + p @ p) * active / t_r)


def reward_ori(e_yaw: float, w_yaw: float, delta_yaw: float) -> float:
    if delta_yaw <= 0:
        raise ValueError("delta_yaw must be positive")
    return float(math.exp(-abs(e_yaw - w_yaw) * delta_yaw))


def stability_metric(phi_xy, omega_xy, k1: float, k2: float) -> float:
    """1 / (1 + k1·|φ_xy|² + k2·|ω_xy|²) for roll/pitch angles and rates."""
    if k1 <= 0 or k2 <= 0:
        raise ValueError("k1, k2 must be positive")
    phi = np.asarray(phi_xy, dtype=np.float64)
    om = np.asarray(omega_xy, dtype=np.float64)
    return float(1.0 / (1.0 + k1 * (phi @ phi) + k2 * (om @ om)))


def discounted_return(rewards: Sequence[float], gamma: float = 0.99) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g


# -- episodes and metrics --------------------------------------------------------

OUTCOMES = ("success", "fall", "timeout", "collision")


@dataclass
class EpisodeRecord:
    """One rollout. ``steps`` holds per-step dicts (see README for the layout)."""

    seed: int
    outcome: str
    planned_length: float
    dt: float
    steps: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return self.dt * len(self.steps)

    @property
    def distance_traveled(self) -> float:
        if not self.steps:
            return 0.0
        xy = np.array([s["state"][:2] for s in self.steps])
        start = np.asarray(self.meta.get("start", xy[0]))[:2]
        xy = np.vstack([start, xy])
        return float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())

    @property
    def collisions(self) -> int:
        return int(sum(bool(s.get("collision", False)) for s in self.steps))

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "outcome": self.outcome, "planned_length": self.planned_length,
                           "dt": self.dt, "meta": self.meta, "steps": self.steps}, default=_json_default)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        d = json.loads(line)
        return cls(d["seed"], d["outcome"], d["planned_length"], d["dt"], d["steps"], d.get("meta", {}))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


@dataclass
class Metrics:
    success: float  # %
    traverse: float  # %
    collision: float  # events per second
    stability: float
    episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(records: Sequence[EpisodeRecord]) -> Metrics:
    if not records:
        raise ValueError("compute_metrics needs at least one record")
    succ = [r.outcome == "success" for r in records]
    trav = []
    for r in records:
        ratio = 1.0 if r.planned_length <= 0 else r.distance_traveled / r.planned_length
        trav.append(min(ratio, 1.0))
    total_time = sum(r.duration for r in records)
    total_coll = sum(r.collisions for r in records)
    stab = [s["stability"] for r in records for s in r.steps]
    return Metrics(
        success=100.0 * float(np.mean(succ)),
        traverse=100.0 * float(np.mean(trav)),
        collision=float(total_coll / total_time) if total_time > 0 else 0.0,
        stability=float(np.mean(stab)) if stab else 0.0,
        episodes=len(records),
    )
