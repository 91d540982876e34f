"""Episode sampling and closed-loop rollouts shared by collection and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from ..planner.expert import ExpertFollower, ExpertPlan, FollowerParams, NoPathError, inflate, plan_expert
from ..world import (
    Action,
    EpisodeRecord,
    NavigationCommand,
    WalkerParams,
    WalkerState,
    World,
    navigation_command,
    project_goal,
    spawn,
    stability_metric,
    step,
)


class ResampleLimitError(RuntimeError):
    pass


@dataclass
class EpisodeParams:
    dt: float = 0.1
    goal_tolerance: float = 0.5
    t_max_range: tuple[float, float] = (10.0, 25.0)
    t_r: float = 2.0
    goal_distance: tuple[float, float] = (2.0, 3.0)
    start_margin: float = 1.0
    heading_spread: float = math.pi / 3
    k1: float = 5.0
    k2: float = 0.5
    max_resamples: int = 100
    inflation: int = 3
    walker: WalkerParams = field(default_factory=WalkerParams)


@dataclass
class EpisodeSetup:
    start: np.ndarray
    yaw: float
    goal: np.ndarray
    t_max: float
    plan: ExpertPlan


def sample_episode(world: World, rng: np.random.Generator, params: EpisodeParams) -> EpisodeSetup:
    """Start on a clear cell, goal 2-3 m away projected onto reachable cells, expert path exists."""
    res = world.resolution
    free = inflate(world.traversability_at(0.0), params.inflation + 1)
    nx, ny = free.shape
    m = int(math.ceil(params.start_margin / res))
    ii, jj = np.nonzero(free[m:nx - m, m:ny - m])
    if len(ii) == 0:
        raise ResampleLimitError("world has no clear start cell")
    reach = inflate(world.traversability, params.inflation)
    for _ in range(params.max_resamples):
        k = int(rng.integers(len(ii)))
        start = (np.array([ii[k] + m, jj[k] + m]) + 0.5) * res
        ang = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(*params.goal_distance)
        goal = start + dist * np.array([math.cos(ang), math.sin(ang)])
        goal = np.clip(goal, 0.5, world.config.arena_size - 0.5)
        goal = project_goal(np.append(goal, 0.0), start, reach, res)[:2]
        t_max = float(rng.uniform(*params.t_max_range))
        yaw = float(math.atan2(*(goal - start)[::-1]) + rng.uniform(-params.heading_spread, params.heading_spread))
        if np.linalg.norm(goal - start) < params.goal_distance[0] * 0.75:
            continue
        try:
            plan = plan_expert(world.traversability_at(0.0), start, goal, res, params.inflation)
        except NoPathError:
            continue
        if plan.length > params.goal_distance[1] * 2.0:
            continue
        return EpisodeSetup(start, yaw, goal, t_max, plan)
    raise ResampleLimitError(f"no reachable episode after {params.max_resamples} attempts")


class Controller(Protocol):
    def reset(self, world: World, setup: EpisodeSetup) -> None: ...

    def act(self, state: WalkerState, command: NavigationCommand) -> tuple[Action, dict]: ...


class ExpertController:
    """Privileged pure-pursuit expert as a closed-loop controller."""

    def __init__(self, params: FollowerParams | None = None):
        self.params = params or FollowerParams()
        self.follower: ExpertFollower | None = None

    def reset(self, world: World, setup: EpisodeSetup):
        self.follower = ExpertFollower(world, setup.plan, setup.goal, self.params)

    def act(self, state: WalkerState, command: NavigationCommand) -> tuple[Action, dict]:
        return self.follower.act(state), {}


class EpisodeRun:
    """One episode advanced step by step, so several can run in lockstep."""

    def __init__(self, world: World, setup: EpisodeSetup, params: EpisodeParams, seed: int):
        self.world, self.setup, self.params, self.seed = world, setup, params, seed
        self.rng = np.random.default_rng(seed)
        self.state = spawn(world, setup.start, setup.yaw)
        self.steps: list[dict] = []
        self.outcome: str | None = None
        self.collisions = 0
        self.n_steps = int(math.ceil(setup.t_max / params.dt - 1e-9))

    @property
    def done(self) -> bool:
        return self.outcome is not None

    def command(self) -> NavigationCommand | None:
        """Command for the next step, or None once the episode has ended."""
        if self.done:
            return None
        cmd = navigation_command(self.state, self.setup.goal, self.setup.t_max)
        if np.linalg.norm(cmd.p_xy) < self.params.goal_tolerance:
            self.outcome = "success"
        elif len(self.steps) >= self.n_steps:
            self.outcome = "timeout"
        return None if self.done else cmd

    def advance(self, cmd: NavigationCommand, action: Action, info: dict | None = None):
        p = self.params
        self.state, ev = step(self.state, action, self.world, p.dt, self.rng, p.walker)
        s = self.state
        self.collisions += int(ev["collision"])
        rec = {
            "t": s.t,
            "state": s.to_list(),
            "action": action.as_array().tolist(),
            "command": cmd.as_array().tolist(),
            "collision": bool(ev["collision"]),
            "stability": stability_metric([s.roll, s.pitch], [s.wx, s.wy], p.k1, p.k2),
        }
        rec.update(info or {})
        self.steps.append(rec)
        if ev["fall"]:
            self.outcome = "fall"
        elif self.collisions >= p.walker.max_collisions:
            self.outcome = "collision"

    def record(self) -> EpisodeRecord:
        su = self.setup
        meta = {"start": su.start.tolist(), "yaw": su.yaw, "goal": su.goal.tolist(), "t_max": su.t_max}
        return EpisodeRecord(self.seed, self.outcome or "timeout", su.plan.length, self.params.dt, self.steps, meta)


def run_episode(world: World, setup: EpisodeSetup, controller, params: EpisodeParams, seed: int,
                on_step: Callable[[int, WalkerState, NavigationCommand, Action], dict] | None = None
                ) -> EpisodeRecord:
    """Roll out ``controller`` from ``setup``.

    ``on_step(k, state, command, action)`` runs after the controller acts on step k
    and may attach extra fields to that step's record.
    """
    run = EpisodeRun(world, setup, params, seed)
    controller.reset(world, setup)
    while (cmd := run.command()) is not None:
        action, info = controller.act(run.state, cmd)
        if on_step:
            info = {**info, **on_step(len(run.steps), run.state, cmd, action)}
        run.advance(cmd, action, info)
    return run.record()
