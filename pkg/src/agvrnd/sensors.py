"""Planar ray-perception sensors and the 76-value observation vector.

Each ray reports four values in the order ``[tag_wall, tag_target, hit,
distance_frac]``. Obstacles are reported with the wall tag. The agent has
no heading, so the forward sensor is fixed on world +Z.

Angles are measured in the XZ plane from +X towards +Z.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:
    from agvrnd.env import SceneConfig, WorldState

TAGS = ("wall", "target")
INTERNAL_DIM = 8
RAY_DIM = 4


@dataclass(frozen=True)
class RaySensorConfig:
    ray_count: int
    fov_degrees: float
    max_range: float
    center_degrees: float = 0.0
    tags: tuple[str, ...] = TAGS

    def __post_init__(self):
        if self.ray_count < 1:
            raise ValueError(f"ray_count must be >= 1, got {self.ray_count}")
        if not 0.0 < self.fov_degrees <= 360.0:
            raise ValueError(f"fov_degrees must be in (0, 360], got {self.fov_degrees}")
        if self.max_range <= 0.0:
            raise ValueError(f"max_range must be > 0, got {self.max_range}")
        if tuple(self.tags) != TAGS:
            raise ValueError(f"tags must be {list(TAGS)}, got {list(self.tags)}")

    def angles_degrees(self) -> np.ndarray:
        """Ray angles in sensor order.

        A full circle is split into ``ray_count`` equal sectors starting at
        ``center_degrees``; a partial fan spans ``center ± fov/2`` inclusive.
        """
        n = self.ray_count
        if self.fov_degrees >= 360.0:
            return self.center_degrees + np.arange(n) * (360.0 / n)
        if n == 1:
            return np.array([float(self.center_degrees)])
        half = self.fov_degrees / 2.0
        return self.center_degrees - half + np.arange(n) * (self.fov_degrees / (n - 1))

    def directions(self) -> np.ndarray:
        rad = np.deg2rad(self.angles_degrees())
        return np.stack([np.cos(rad), np.sin(rad)], axis=1)


def default_sensors(max_range: float) -> tuple[RaySensorConfig, RaySensorConfig]:
    """10 rays over 360 degrees plus 7 forward rays over 120 degrees."""
    return (
        RaySensorConfig(ray_count=10, fov_degrees=360.0, max_range=max_range, center_degrees=0.0),
        RaySensorConfig(ray_count=7, fov_degrees=120.0, max_range=max_range, center_degrees=90.0),
    )


def observation_dim(sensors: Sequence[RaySensorConfig]) -> int:
    return INTERNAL_DIM + RAY_DIM * sum(s.ray_count for s in sensors)


class RayHit(NamedTuple):
    tag_wall: int
    tag_target: int
    hit: int
    distance_frac: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def cast_rays(origins: np.ndarray, directions: np.ndarray, scene: SceneConfig,
              targets: np.ndarray, max_range: float | np.ndarray) -> np.ndarray:
    """Vectorised nearest-hit ray cast.

    origins, directions and targets are ``(M, 2)`` arrays in XZ; directions
    must be unit length. Returns ``(M, 4)`` ray encodings.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    m = o.shape[0]
    h = scene.half_extent

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        # walls: the ray always exits the square through the wall it faces
        wall_x = np.where(d[:, 0] > 0, (h - o[:, 0]) * inv[:, 0],
                          np.where(d[:, 0] < 0, (-h - o[:, 0]) * inv[:, 0], np.inf))
        wall_z = np.where(d[:, 1] > 0, (h - o[:, 1]) * inv[:, 1],
                          np.where(d[:, 1] < 0, (-h - o[:, 1]) * inv[:, 1], np.inf))
        t_wall = np.minimum(wall_x, wall_z)

        lo, hi = scene.box_bounds
        if lo.shape[0]:
            # slab test, (M, K, 2)
            oo = o[:, None, :]
            t1 = (lo[None] - oo) * inv[:, None, :]
            t2 = (hi[None] - oo) * inv[:, None, :]
            parallel = (d == 0.0)[:, None, :]
            inside_slab = (oo >= lo[None]) & (oo <= hi[None])
            t_near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
            t_far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
            t_enter = t_near.max(axis=2)
            t_exit = t_far.min(axis=2)
            box_hit = (t_enter <= t_exit) & (t_exit >= 0.0)
            t_box = np.where(box_hit, np.maximum(t_enter, 0.0), np.inf).min(axis=1)
            t_wall = np.minimum(t_wall, t_box)

    oc = tgt - o
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - scene.target_radius ** 2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t_circle = np.where(c <= 0.0, 0.0, b - root)
    t_target = np.where((disc >= 0.0) & (t_circle >= 0.0), t_circle, np.inf)

    rng = np.broadcast_to(np.asarray(max_range, dtype=np.float64), (m,))
    target_first = t_target <= t_wall
    t = np.where(target_first, t_target, t_wall)
    hit = t <= rng

    out = np.zeros((m, RAY_DIM))
    out[:, 0] = hit & ~target_first
    out[:, 1] = hit & target_first
    out[:, 2] = hit
    out[:, 3] = np.where(hit, t / rng, 1.0)
    return out


def cast_ray(origin, direction, scene: SceneConfig, target, max_range: float) -> RayHit:
    """Single-ray wrapper around :func:`cast_rays`. ``target`` may be 2D or 3D."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape[-1] == 3:
        target = target[[0, 2]]
    enc = cast_rays(np.asarray(origin, dtype=np.float64)[None],
                    np.asarray(direction, dtype=np.float64)[None],
                    scene, target[None], max_range)[0]
    return RayHit(int(enc[0]), int(enc[1]), int(enc[2]), float(enc[3]))


class _RayLayout:
    """Cached per-scene ray directions and ranges."""

    def __init__(self, sensors: Sequence[RaySensorConfig]):
        self.directions = np.concatenate([s.directions() for s in sensors], axis=0)
        self.ranges = np.concatenate([np.full(s.ray_count, float(s.max_range)) for s in sensors])
        self.n_rays = self.directions.shape[0]


_LAYOUTS: dict[tuple, _RayLayout] = {}


def _layout(sensors: Sequence[RaySensorConfig]) -> _RayLayout:
    key = tuple(sensors)
    if key not in _LAYOUTS:
        _LAYOUTS[key] = _RayLayout(sensors)
    return _LAYOUTS[key]


def build_observations(agent_xz: np.ndarray, agent_vel: np.ndarray, target_xz: np.ndarray,
                       scene: SceneConfig, sensors: Sequence[RaySensorConfig] | None = None) -> np.ndarray:
    """Batched observation builder: ``(N, 2)`` inputs to ``(N, 76)`` output."""
    agent_xz = np.asarray(agent_xz, dtype=np.float64)
    n = agent_xz.shape[0]
    lay = _layout(scene.sensors if sensors is None else sensors)
    r = lay.n_rays

    obs = np.empty((n, INTERNAL_DIM + RAY_DIM * r))
    obs[:, 0] = agent_xz[:, 0]
    obs[:, 1] = scene.agent_y
    obs[:, 2] = agent_xz[:, 1]
    obs[:, 3] = target_xz[:, 0]
    obs[:, 4] = scene.agent_y
    obs[:, 5] = target_xz[:, 1]
    obs[:, 6:8] = agent_vel

    origins = np.repeat(agent_xz, r, axis=0)
    dirs = np.tile(lay.directions, (n, 1))
    tgts = np.repeat(np.asarray(target_xz, dtype=np.float64), r, axis=0)
    rays = cast_rays(origins, dirs, scene, tgts, np.tile(lay.ranges, n))
    obs[:, INTERNAL_DIM:] = rays.reshape(n, RAY_DIM * r)
    return obs


def build_observation(state: WorldState, scene: SceneConfig,
                      sensors: Sequence[RaySensorConfig] | None = None) -> np.ndarray:
    """Observation for one world state: internal 8 values then every ray block."""
    return build_observations(state.agent_pos[None, [0, 2]], state.agent_vel[None],
                              state.target_pos[None, [0, 2]], scene, sensors)[0]
