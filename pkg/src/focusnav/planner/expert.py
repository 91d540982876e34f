"""Scripted privileged expert: inflated 8-connected A*, shortcutting, pure pursuit."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from ..world import Action, World, WalkerState, mark_discs, stability_metric

# 8-neighbourhood ordered by heading, so |d1 - d2| (mod 8) measures the turn
MOVES = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
SQRT2 = math.sqrt(2.0)


class NoPathError(RuntimeError):
    pass


def inflate(trav: np.ndarray, cells: int = 1) -> np.ndarray:
    """Free cells whose whole (2c+1)² neighbourhood is free. Off-map counts as free."""
    free = np.asarray(trav).astype(bool)
    out = free.copy()
    nx, ny = free.shape
    for di in range(-cells, cells + 1):
        for dj in range(-cells, cells + 1):
            shifted = np.ones_like(free)
            src = free[max(di, 0):nx + min(di, 0), max(dj, 0):ny + min(dj, 0)]
            shifted[max(-di, 0):nx + min(-di, 0), max(-dj, 0):ny + min(-dj, 0)] = src
            out &= shifted
    return out


def astar(free: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]]:
    """8-connected A* without corner cutting, Euclidean heuristic (cell units).

    Frontier ties are broken by the smaller heading change, then the lower
    flat cell index. The start cell itself need not be free.
    """
    nx, ny = free.shape
    si, sj = start
    gi, gj = goal
    if not (0 <= gi < nx and 0 <= gj < ny) or not free[gi, gj]:
        raise NoPathError(f"goal cell {goal} is blocked")
    if not (0 <= si < nx and 0 <= sj < ny):
        raise NoPathError(f"start cell {start} is off the map")
    g = np.full((nx, ny), np.inf)
    came = np.full((nx, ny), -1, dtype=np.int64)
    heading = np.full((nx, ny), -1, dtype=np.int64)
    closed = np.zeros((nx, ny), dtype=bool)
    g[si, sj] = 0.0
    h0 = math.hypot(gi - si, gj - sj)
    heap = [(round(h0, 9), 0, si * ny + sj)]
    while heap:
        _, _, idx = heapq.heappop(heap)
        i, j = divmod(idx, ny)
        if closed[i, j]:
            continue
        closed[i, j] = True
        if (i, j) == (gi, gj):
            break
        hd = heading[i, j]
        for d, (di, dj) in enumerate(MOVES):
            a, b = i + di, j + dj
            if not (0 <= a < nx and 0 <= b < ny) or not free[a, b] or closed[a, b]:
                continue
            if di and dj and not (free[i + di, j] and free[i, j + dj]):
                continue
            ng = g[i, j] + (SQRT2 if di and dj else 1.0)
            if ng < g[a, b] - 1e-12:
                g[a, b] = ng
                came[a, b] = idx
                heading[a, b] = d
                turn = 0 if hd < 0 else min(abs(d - hd), 8 - abs(d - hd))
                heapq.heappush(heap, (round(ng + math.hypot(gi - a, gj - b), 9), turn, a * ny + b))
    if not closed[gi, gj]:
        raise NoPathError(f"no path from {start} to {goal}")
    path = [(gi, gj)]
    idx = came[gi, gj]
    while idx >= 0:
        path.append(divmod(int(idx), ny))
        idx = came[path[-1]]
    return path[::-1]


def segment_clear(free: np.ndarray, a, b, resolution: float, exempt=()) -> bool:
    """Every cell touched by segment a→b (sampled at quarter cells) is free or exempt."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n = max(int(np.ceil(np.linalg.norm(b - a) / (resolution / 4))), 1)
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    pts = a + s * (b - a)
    cells = np.floor(pts / resolution).astype(np.int64)
    nx, ny = free.shape
    for i, j in {(int(i), int(j)) for i, j in cells}:
        if (i, j) in exempt:
            continue
        if not (0 <= i < nx and 0 <= j < ny) or not free[i, j]:
            return False
    return True


def shortcut(points: np.ndarray, free: np.ndarray, resolution: float, exempt=()) -> np.ndarray:
    """Greedy line-of-sight simplification: jump to the farthest visible vertex."""
    out = [0]
    k = 0
    while k < len(points) - 1:
        nxt = k + 1
        for m in range(len(points) - 1, k + 1, -1):
            if segment_clear(free, points[k], points[m], resolution, exempt):
                nxt = m
                break
        out.append(nxt)
        k = nxt
    return points[out]


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum()) if len(points) > 1 else 0.0


@dataclass
class ExpertPlan:
    cells: list[tuple[int, int]]
    polyline: np.ndarray  # (M, 2) world metric
    length: float
    free: np.ndarray  # inflated traversability used for planning
    resolution: float

    def vertices_safe(self) -> bool:
        """Every polyline vertex lies on an inflation-respecting cell (start cell exempt)."""
        nx, ny = self.free.shape
        for k, p in enumerate(self.polyline):
            i, j = int(np.floor(p[0] / self.resolution)), int(np.floor(p[1] / self.resolution))
            if k == 0 and (i, j) == self.cells[0]:
                if not self.free[i, j]:
                    continue
            if not (0 <= i < nx and 0 <= j < ny) or not self.free[i, j]:
                return False
        return True


def plan_expert(trav: np.ndarray, start_xy, goal_xy, resolution: float, inflation: int = 1) -> ExpertPlan:
    """Plan on a traversability grid anchored at the origin; raises NoPathError."""
    free = inflate(trav, inflation)
    start_xy = np.asarray(start_xy, dtype=np.float64)[:2]
    goal_xy = np.asarray(goal_xy, dtype=np.float64)[:2]
    s = tuple(int(v) for v in np.floor(start_xy / resolution))
    g = tuple(int(v) for v in np.floor(goal_xy / resolution))
    nx, ny = free.shape
    if not (0 <= s[0] < nx and 0 <= s[1] < ny) or not np.asarray(trav)[s]:
        raise NoPathError(f"start cell {s} is not traversable")
    cells = astar(free, s, g)
    pts = (np.array(cells, dtype=np.float64) + 0.5) * resolution
    pts[0], pts[-1] = start_xy, goal_xy
    if len(pts) == 1:
        pts = np.vstack([start_xy, goal_xy])
    poly = shortcut(pts, free, resolution, exempt={s})
    return ExpertPlan(cells, poly, polyline_length(poly), free, resolution)


def project_onto_polyline(poly: np.ndarray, xy, s_lo: float = 0.0, s_hi: float = np.inf) -> float:
    """Arc-length position of the closest polyline point within [s_lo, s_hi]."""
    seg = np.diff(poly, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    best, best_s = np.inf, 0.0
    for k in range(len(seg)):
        if seg_len[k] == 0:
            continue
        u = np.clip(((xy - poly[k]) @ seg[k]) / seg_len[k] ** 2, 0.0, 1.0)
        s = float(np.clip(cum[k] + u * seg_len[k], s_lo, s_hi))
        if s < cum[k] or s > cum[k + 1]:
            continue
        p = poly[k] + (s - cum[k]) / seg_len[k] * seg[k]
        d = float(np.linalg.norm(p - xy))
        if d < best:
            best, best_s = d, s
    if not np.isfinite(best):
        return float(np.clip(s_lo, 0.0, cum[-1]))
    return best_s


def point_at(poly: np.ndarray, s: float) -> np.ndarray:
    seg = np.diff(poly, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = float(np.clip(s, 0.0, cum[-1]))
    k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)) if len(seg) else 0
    if not len(seg) or seg_len[k] == 0:
        return poly[min(k + 1, len(poly) - 1)].copy()
    return poly[k] + (s - cum[k]) / seg_len[k] * seg[k]


def remaining_path(poly: np.ndarray, robot_xy, s: float) -> np.ndarray:
    """Robot position followed by the polyline beyond arc length s."""
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    rest = poly[cum > s + 1e-9]
    return np.vstack([np.asarray(robot_xy, dtype=np.float64)[None], rest]) if len(rest) else \
        np.vstack([robot_xy, poly[-1]])


@dataclass
class FollowerParams:
    lookahead: float = 0.6
    v_nominal: float = 0.8
    yaw_gain: float = 2.0
    turn_in_place: float = math.radians(60)
    rough_gain: float = 1.5
    stability_slow: float = 0.6
    goal_tolerance: float = 0.5
    replan_period: float = 1.0
    obstacle_margin: float = 0.35
    inflation: int = 3
    k1: float = 5.0
    k2: float = 0.5


@dataclass
class ExpertFollower:
    """Pure pursuit along an ExpertPlan with privileged terrain and obstacle access."""

    world: World
    plan: ExpertPlan
    goal: np.ndarray
    params: FollowerParams = field(default_factory=FollowerParams)
    progress: float = 0.0
    _last_plan_t: float = 0.0

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64)[:2]

    def _replan(self, state: WalkerState):
        trav = self.world.traversability.copy()
        if self.world.dynamic:
            trav = self.world.traversability_at(state.t)
            # widen moving footprints so the path keeps a margin
            pos = self.world.dynamic_positions(state.t)
            rad = np.array([d.radius + self.params.obstacle_margin for d in self.world.dynamic])
            keep = np.linalg.norm(pos - state.xy, axis=1) > rad  # never wall in the robot itself
            mark_discs(trav, np.column_stack([pos[keep], rad[keep]]), self.world.resolution)
        try:
            self.plan = plan_expert(trav, state.xy, self.goal, self.world.resolution, self.params.inflation)
            self.progress = 0.0
        except NoPathError:
            pass
        self._last_plan_t = state.t

    def act(self, state: WalkerState) -> Action:
        p = self.params
        if self.world.dynamic and state.t - self._last_plan_t >= p.replan_period:
            self._replan(state)
        poly = self.plan.polyline
        self.progress = project_onto_polyline(poly, state.xy, self.progress - 0.3, self.progress + 1.5)
        to_goal = self.goal - state.xy
        dist_goal = float(np.hypot(*to_goal))
        target = point_at(poly, self.progress + p.lookahead)
        if dist_goal < p.lookahead:
            target = self.goal
        d = target - state.xy
        c, s = math.cos(state.yaw), math.sin(state.yaw)
        alpha = math.atan2(-s * d[0] + c * d[1], c * d[0] + s * d[1])
        yaw_rate = p.yaw_gain * alpha
        v = p.v_nominal
        # slow down over rough terrain ahead (privileged elevation)
        rough = max(self.world.gradient_at(point_at(poly, self.progress + a)) for a in (0.0, 0.3, 0.6))
        v /= 1.0 + p.rough_gain * rough
        sm = stability_metric([state.roll, state.pitch], [state.wx, state.wy], p.k1, p.k2)
        if sm < p.stability_slow:
            v *= 0.5
        if abs(alpha) > p.turn_in_place:
            v = 0.05
        else:
            v *= max(math.cos(alpha), 0.0)
        v = min(v, 0.8 * dist_goal + 0.1)
        vy = 0.0
        if self.world.dynamic:
            v, vy = self._avoid(state, v)
        return Action(v, vy, yaw_rate)

    def _avoid(self, state: WalkerState, v: float) -> tuple[float, float]:
        """Stop and sidestep when a moving obstacle is close ahead."""
        pos = self.world.dynamic_positions(state.t)
        c, s = math.cos(state.yaw), math.sin(state.yaw)
        vy = 0.0
        for (ox, oy), d in zip(pos, self.world.dynamic):
            dx, dy = ox - state.x, oy - state.y
            bx, by = c * dx + s * dy, -s * dx + c * dy
            gap = math.hypot(bx, by) - d.radius - 0.25
            if gap < 0.6 and bx > -0.2:
                v = min(v, 0.0 if gap < 0.3 else 0.2)
                vy = -0.3 if by > 0 else 0.3
        return v, vy


def resample_waypoints(polyline: np.ndarray, n: int, eps: float = 0.5) -> np.ndarray:
    """n points at arc-length fractions k/n (k = 1..n) along the polyline; the last is its end.

    Paths shorter than ``eps`` collapse every point onto the end.
    """
    poly = np.asarray(polyline, dtype=np.float64)
    if n < 1:
        raise ValueError("need at least one waypoint")
    total = polyline_length(poly)
    if total < eps:
        return np.repeat(poly[-1:], n, axis=0)
    pts = np.array([point_at(poly, total * k / n) for k in range(1, n + 1)])
    pts[-1] = poly[-1]
    return pts


def to_robot_frame(points, xy, yaw: float) -> np.ndarray:
    """World (x, y) points into the yaw-aligned robot frame."""
    d = np.asarray(points, dtype=np.float64) - np.asarray(xy, dtype=np.float64)[:2]
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def waypoint_labels(polyline: np.ndarray, robot_xy, yaw: float, progress: float, n: int,
                    extent: float, eps: float = 0.5) -> np.ndarray:
    """Ground-truth waypoints from the robot along the rest of the plan, robot-centric and clamped."""
    rest = remaining_path(np.asarray(polyline, dtype=np.float64), np.asarray(robot_xy, dtype=np.float64), progress)
    q = to_robot_frame(resample_waypoints(rest, n, eps), robot_xy, yaw)
    return np.clip(q, -extent / 2, extent / 2)
