"""Planar rigid-body world for a spherical AGV.

The agent moves in the XZ plane (y is pinned at 0.5) under a force set by a
2D action. Every transition is a pure function of its inputs. The scalar
API (:func:`reset`, :func:`step`) and the batched :class:`VecEnv` share the
same array kernels, so both produce bit-identical trajectories.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from agvrnd.sensors import RaySensorConfig, build_observations, default_sensors, observation_dim

TARGET_REWARD = 5.0


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping a state whose episode has already ended."""


@dataclass(frozen=True)
class PhysicsParams:
    dt: float = 0.02
    mass: float = 1.0
    force_scale: float = 50.0
    linear_drag: float = 0.05
    max_speed: float = 10.0

    def __post_init__(self):
        if self.dt <= 0 or self.mass <= 0 or self.force_scale <= 0 or self.max_speed <= 0:
            raise ValueError("dt, mass, force_scale and max_speed must be positive")
        if not 0.0 <= self.linear_drag < 1.0:
            raise ValueError(f"linear_drag must be in [0, 1), got {self.linear_drag}")


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]

    def contains_xz(self, x: float, z: float, margin: float = 0.0) -> bool:
        return (abs(x - self.center[0]) < self.half_size[0] + margin
                and abs(z - self.center[2]) < self.half_size[2] + margin)

    def distance_xz(self, x: float, z: float) -> float:
        dx = max(abs(x - self.center[0]) - self.half_size[0], 0.0)
        dz = max(abs(z - self.center[2]) - self.half_size[2], 0.0)
        return float(np.hypot(dx, dz))


@dataclass(frozen=True)
class SceneConfig:
    name: str
    half_extent: float
    agent_start: tuple[float, float, float]
    target_spawns: tuple[tuple[float, float, float], ...]
    max_step: int
    obstacles: tuple[Box, ...] = ()
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    agent_radius: float = 0.5
    target_radius: float = 0.5
    sensors: tuple[RaySensorConfig, ...] = field(default_factory=lambda: default_sensors(20.0))

    def __post_init__(self):
        if self.max_step <= 0:
            raise ValueError(f"max_step must be positive, got {self.max_step}")
        if not self.target_spawns:
            raise ValueError("scene needs at least one target spawn")
        lim = self.half_extent - self.agent_radius
        for label, p in [("agent_start", self.agent_start)] + [
                (f"target_spawn[{i}]", s) for i, s in enumerate(self.target_spawns)]:
            if not (abs(p[0]) < lim and abs(p[2]) < lim):
                raise ValueError(f"{label} {p} lies outside the walls (clearance {self.agent_radius})")
        for i, s in enumerate(self.target_spawns):
            for box in self.obstacles:
                if box.distance_xz(s[0], s[2]) < self.target_radius:
                    raise ValueError(f"target_spawn[{i}] {s} intersects obstacle {box}")
        for box in self.obstacles:
            if box.distance_xz(self.agent_start[0], self.agent_start[2]) < self.agent_radius:
                raise ValueError(f"agent_start intersects obstacle {box}")

    @property
    def agent_y(self) -> float:
        return float(self.agent_start[1])

    @property
    def contact_distance(self) -> float:
        return self.agent_radius + self.target_radius

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.sensors)

    @cached_property
    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Obstacle XZ extents as ``(lo, hi)`` arrays of shape ``(K, 2)``."""
        if not self.obstacles:
            return np.zeros((0, 2)), np.zeros((0, 2))
        c = np.array([[b.center[0], b.center[2]] for b in self.obstacles], dtype=np.float64)
        h = np.array([[b.half_size[0], b.half_size[2]] for b in self.obstacles], dtype=np.float64)
        return c - h, c + h

    @cached_property
    def spawn_xz(self) -> np.ndarray:
        return np.array([[s[0], s[2]] for s in self.target_spawns], dtype=np.float64)

    def without_obstacles(self) -> SceneConfig:
        return replace(self, obstacles=())


@dataclass(frozen=True, eq=False)
class WorldState:
    agent_pos: np.ndarray  # (3,)
    agent_vel: np.ndarray  # (2,) x and z components
    target_pos: np.ndarray  # (3,)
    step_count: int = 0
    done: bool = False

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (np.array_equal(self.agent_pos, other.agent_pos)
                and np.array_equal(self.agent_vel, other.agent_vel)
                and np.array_equal(self.target_pos, other.target_pos)
                and self.step_count == other.step_count and self.done == other.done)


class Action(NamedTuple):
    fx: float
    fz: float


class StepOutcome(NamedTuple):
    reward_e: float
    terminated: bool
    truncated: bool


# -- array kernels, shapes (N, 2) -----------------------------------------

def integrate_arrays(pos: np.ndarray, vel: np.ndarray, action: np.ndarray,
                     physics: PhysicsParams) -> tuple[np.ndarray, np.ndarray]:
    a = np.clip(action, -1.0, 1.0)
    vel = (vel + (physics.force_scale / physics.mass) * a * physics.dt) * (1.0 - physics.linear_drag)
    speed = np.sqrt(np.einsum("ij,ij->i", vel, vel))
    over = speed > physics.max_speed
    if over.any():
        vel = vel.copy()
        vel[over] *= (physics.max_speed / speed[over])[:, None]
    pos = pos + vel * physics.dt
    return pos, vel


def _push_out_of_box(p: np.ndarray, lo: np.ndarray, hi: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    # centre strictly inside the box: leave through the nearest face
    pen = np.array([p[0] - lo[0], hi[0] - p[0], p[1] - lo[1], hi[1] - p[1]])
    face = int(np.argmin(pen))
    axis, sign = divmod(face, 2)
    normal = np.zeros(2)
    normal[axis] = -1.0 if sign == 0 else 1.0
    q = p.copy()
    q[axis] = (lo[axis] - r) if sign == 0 else (hi[axis] + r)
    return q, normal


def resolve_arrays(pos: np.ndarray, vel: np.ndarray, scene: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    pos = pos.copy()
    vel = vel.copy()
    r = scene.agent_radius
    lo, hi = scene.box_bounds
    for k in range(lo.shape[0]):
        q = np.clip(pos, lo[k], hi[k])
        d = pos - q
        dist = np.sqrt(np.einsum("ij,ij->i", d, d))
        contact = dist < r
        if not contact.any():
            continue
        for i in np.nonzero(contact)[0]:
            if dist[i] > 0.0:
                n = d[i] / dist[i]
                pos[i] = q[i] + n * r
            else:
                pos[i], n = _push_out_of_box(pos[i], lo[k], hi[k], r)
            vn = vel[i] @ n
            if vn < 0.0:
                vel[i] = vel[i] - vn * n

    lim = scene.half_extent - r
    into_wall = ((pos > lim) & (vel > 0.0)) | ((pos < -lim) & (vel < 0.0))
    pos = np.clip(pos, -lim, lim)
    vel = np.where(into_wall, 0.0, vel)
    return pos, vel


def step_arrays(pos, vel, target, steps, action, scene: SceneConfig):
    """One transition for N agents. Returns new arrays plus reward/flags."""
    pos, vel = integrate_arrays(pos, vel, action, scene.physics)
    pos, vel = resolve_arrays(pos, vel, scene)
    steps = steps + 1
    d = pos - target
    touching = np.sqrt(np.einsum("ij,ij->i", d, d)) <= scene.contact_distance
    reward = np.where(touching, TARGET_REWARD, -1.0 / scene.max_step)
    truncated = (steps >= scene.max_step) & ~touching
    return pos, vel, steps, reward, touching, truncated


# -- scalar API -----------------------------------------------------------

def _xz(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p[[0, 2]]


def _xyz(xz: np.ndarray, y: float) -> np.ndarray:
    return np.array([xz[0], y, xz[1]], dtype=np.float64)


def reset(scene: SceneConfig, rng: np.random.Generator, spawn_index: int | None = None) -> WorldState:
    """Fresh episode: agent at the start, at rest; target drawn uniformly from the spawns."""
    if spawn_index is None:
        spawn_index = int(rng.integers(len(scene.target_spawns)))
    return WorldState(
        agent_pos=np.array(scene.agent_start, dtype=np.float64),
        agent_vel=np.zeros(2),
        target_pos=np.array(scene.target_spawns[spawn_index], dtype=np.float64),
    )


def integrate(state: WorldState, action: Sequence[float], physics: PhysicsParams) -> WorldState:
    pos, vel = integrate_arrays(_xz(state.agent_pos)[None], state.agent_vel[None],
                                np.asarray(action, dtype=np.float64)[None], physics)
    return replace(state, agent_pos=_xyz(pos[0], state.agent_pos[1]), agent_vel=vel[0])


def resolve_collisions(state: WorldState, scene: SceneConfig) -> WorldState:
    pos, vel = resolve_arrays(_xz(state.agent_pos)[None], state.agent_vel[None], scene)
    return replace(state, agent_pos=_xyz(pos[0], state.agent_pos[1]), agent_vel=vel[0])


def step(state: WorldState, action: Sequence[float], scene: SceneConfig) -> tuple[WorldState, StepOutcome]:
    """Integrate, resolve collisions, advance the step counter, score the step.

    Raises:
        EpisodeFinishedError: if ``state`` belongs to a finished episode.
    """
    if state.done or state.step_count >= scene.max_step:
        raise EpisodeFinishedError(f"episode already finished at step {state.step_count}")
    pos, vel, steps, reward, term, trunc = step_arrays(
        _xz(state.agent_pos)[None], state.agent_vel[None], _xz(state.target_pos)[None],
        np.array([state.step_count]), np.asarray(action, dtype=np.float64)[None], scene)
    terminated, truncated = bool(term[0]), bool(trunc[0])
    new = WorldState(
        agent_pos=_xyz(pos[0], state.agent_pos[1]),
        agent_vel=vel[0],
        target_pos=state.target_pos.copy(),
        step_count=int(steps[0]),
        done=terminated or truncated,
    )
    return new, StepOutcome(float(reward[0]), terminated, truncated)


def observe(state: WorldState, scene: SceneConfig) -> np.ndarray:
    return build_observations(_xz(state.agent_pos)[None], state.agent_vel[None],
                              _xz(state.target_pos)[None], scene)[0]


# -- batched environment --------------------------------------------------

class EpisodeRecord(NamedTuple):
    env_index: int
    spawn_index: int
    return_e: float
    length: int
    success: bool


@dataclass
class VecStep:
    obs: np.ndarray        # observation to act on next (post auto-reset)
    next_obs: np.ndarray   # true successor of the acted-on observation
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    finished: list[EpisodeRecord]


class VecEnv:
    """N independent copies of one scene with auto-reset.

    Resets draw from ``rng`` in env-index order, so a seed fully determines
    the spawn sequence regardless of what the policy does.
    """

    def __init__(self, scene: SceneConfig, n_envs: int, rng: np.random.Generator):
        self.scene = scene
        self.n_envs = n_envs
        self.rng = rng
        self.pos = np.zeros((n_envs, 2))
        self.vel = np.zeros((n_envs, 2))
        self.target = np.zeros((n_envs, 2))
        self.spawn = np.zeros(n_envs, dtype=np.int64)
        self.steps = np.zeros(n_envs, dtype=np.int64)
        self.ep_return = np.zeros(n_envs)

    @property
    def obs_dim(self) -> int:
        return self.scene.obs_dim

    def _reset_env(self, i: int, spawn_index: int | None = None):
        if spawn_index is None:
            spawn_index = int(self.rng.integers(len(self.scene.target_spawns)))
        s = reset(self.scene, self.rng, spawn_index)
        self.pos[i] = _xz(s.agent_pos)
        self.vel[i] = s.agent_vel
        self.target[i] = _xz(s.target_pos)
        self.spawn[i] = spawn_index
        self.steps[i] = 0
        self.ep_return[i] = 0.0

    def reset(self, spawn_indices: Sequence[int] | None = None) -> np.ndarray:
        for i in range(self.n_envs):
            self._reset_env(i, None if spawn_indices is None else int(spawn_indices[i]))
        return self.observe()

    def observe(self) -> np.ndarray:
        return build_observations(self.pos, self.vel, self.target, self.scene)

    def step(self, actions: np.ndarray, auto_reset: bool = True) -> VecStep:
        self.pos, self.vel, self.steps, reward, term, trunc = step_arrays(
            self.pos, self.vel, self.target, self.steps, actions, self.scene)
        self.ep_return += reward
        next_obs = self.observe()
        finished = []
        done = term | trunc
        for i in np.nonzero(done)[0]:
            finished.append(EpisodeRecord(int(i), int(self.spawn[i]), float(self.ep_return[i]),
                                          int(self.steps[i]), bool(term[i])))
        obs = next_obs
        if auto_reset and done.any():
            for i in np.nonzero(done)[0]:
                self._reset_env(int(i))
            obs = next_obs.copy()
            obs[done] = build_observations(self.pos[done], self.vel[done], self.target[done], self.scene)
        return VecStep(obs, next_obs, reward, term, trunc, finished)
