"""Scene presets and the plain-text scene file format.

A scene file is a list of ``key = value`` lines followed by repeated
``[sensor]`` and ``[obstacle]`` blocks. Vectors are comma separated,
lengths are world units and angles are degrees. ``#`` starts a comment.

    name = simple_static
    half_extent = 10.0
    agent_start = -5.0, 0.5, -8.0
    target_spawn = 5.0, 0.5, -1.5
    max_step = 2000
    physics.dt = 0.02

    [sensor]
    ray_count = 10
    fov_degrees = 360
    max_range = 20
    center_degrees = 0

    [obstacle]
    center = 0.0, 0.5, -4.5
    half_size = 0.5, 0.5, 2.5
"""
from __future__ import annotations

from dataclasses import fields
from importlib import resources
from pathlib import Path

from agvrnd.env import Box, PhysicsParams, SceneConfig
from agvrnd.sensors import RaySensorConfig

PRESETS = ("simple_static", "simple_dynamic", "complex_static", "complex_dynamic")


class SceneFileError(ValueError):
    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
        self.message = message


_PHYSICS_KEYS = {f.name for f in fields(PhysicsParams)}
_SENSOR_KEYS = {"ray_count", "fov_degrees", "max_range", "center_degrees"}
_OBSTACLE_KEYS = {"center", "half_size"}


def _vec3(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def parse_scene(text: str, path: str = "<scene>") -> SceneConfig:
    top: dict[str, tuple[int, str]] = {}
    spawns: list[tuple[float, float, float]] = []
    physics: dict[str, float] = {}
    blocks: list[tuple[str, int, dict[str, tuple[int, str]]]] = []
    section: dict[str, tuple[int, str]] | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            kind = line[1:-1].strip()
            if kind not in ("sensor", "obstacle"):
                raise SceneFileError(path, lineno, f"unknown section [{kind}]")
            section = {}
            blocks.append((kind, lineno, section))
            continue
        if "=" not in line:
            raise SceneFileError(path, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if section is not None:
                kind = blocks[-1][0]
                allowed = _SENSOR_KEYS if kind == "sensor" else _OBSTACLE_KEYS
                if key not in allowed:
                    raise ValueError(f"unknown {kind} key {key!r}")
                if key in section:
                    raise ValueError(f"duplicate key {key!r}")
                section[key] = (lineno, value)
            elif key == "target_spawn":
                spawns.append(_vec3(value))
            elif key.startswith("physics."):
                name = key[len("physics."):]
                if name not in _PHYSICS_KEYS:
                    raise ValueError(f"unknown physics key {name!r}")
                physics[name] = float(value)
            elif key in ("name", "half_extent", "agent_start", "max_step", "agent_radius", "target_radius"):
                if key in top:
                    raise ValueError(f"duplicate key {key!r}")
                top[key] = (lineno, value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise SceneFileError(path, lineno, str(exc)) from None

    for required in ("half_extent", "agent_start", "max_step"):
        if required not in top:
            raise SceneFileError(path, 0, f"missing required key {required!r}")

    def field(block, key, fn):
        lineno, value = block[key]
        try:
            return fn(value)
        except ValueError as exc:
            raise SceneFileError(path, lineno, f"{key}: {exc}") from None

    sensors, obstacles = [], []
    for kind, lineno, block in blocks:
        required = _SENSOR_KEYS - {"center_degrees"} if kind == "sensor" else _OBSTACLE_KEYS
        missing = required - block.keys()
        if missing:
            raise SceneFileError(path, lineno, f"{kind} block missing {sorted(missing)}")
        if kind == "sensor":
            values = dict(ray_count=field(block, "ray_count", int),
                          fov_degrees=field(block, "fov_degrees", float),
                          max_range=field(block, "max_range", float))
            if "center_degrees" in block:
                values["center_degrees"] = field(block, "center_degrees", float)
            try:
                sensors.append(RaySensorConfig(**values))
            except ValueError as exc:
                raise SceneFileError(path, lineno, str(exc)) from None
        else:
            obstacles.append(Box(field(block, "center", _vec3), field(block, "half_size", _vec3)))

    kwargs = {}
    if sensors:
        kwargs["sensors"] = tuple(sensors)
    for key in ("agent_radius", "target_radius"):
        if key in top:
            kwargs[key] = field(top, key, float)
    half_extent = field(top, "half_extent", float)
    agent_start = field(top, "agent_start", _vec3)
    max_step = field(top, "max_step", int)
    try:
        return SceneConfig(
            name=top["name"][1] if "name" in top else Path(path).stem,
            half_extent=half_extent,
            agent_start=agent_start,
            target_spawns=tuple(spawns),
            max_step=max_step,
            obstacles=tuple(obstacles),
            physics=PhysicsParams(**physics),
            **kwargs,
        )
    except ValueError as exc:
        raise SceneFileError(path, 0, str(exc)) from None


def _fmt(v) -> str:
    return ", ".join(repr(float(x)) for x in v)


def format_scene(scene: SceneConfig) -> str:
    lines = [
        "# agvrnd scene file",
        f"name = {scene.name}",
        f"half_extent = {scene.half_extent!r}",
        f"agent_start = {_fmt(scene.agent_start)}",
    ]
    lines += [f"target_spawn = {_fmt(s)}" for s in scene.target_spawns]
    lines += [
        f"max_step = {scene.max_step}",
        f"agent_radius = {scene.agent_radius!r}",
        f"target_radius = {scene.target_radius!r}",
    ]
    lines += [f"physics.{f.name} = {getattr(scene.physics, f.name)!r}" for f in fields(PhysicsParams)]
    for s in scene.sensors:
        lines += ["", "[sensor]", f"ray_count = {s.ray_count}", f"fov_degrees = {float(s.fov_degrees)!r}",
                  f"max_range = {float(s.max_range)!r}", f"center_degrees = {float(s.center_degrees)!r}"]
    for b in scene.obstacles:
        lines += ["", "[obstacle]", f"center = {_fmt(b.center)}", f"half_size = {_fmt(b.half_size)}"]
    return "\n".join(lines) + "\n"


def load_scene(path: str | Path) -> SceneConfig:
    path = Path(path)
    return parse_scene(path.read_text(encoding="utf-8"), str(path))


def save_scene(scene: SceneConfig, path: str | Path) -> None:
    Path(path).write_text(format_scene(scene), encoding="utf-8")


def make_scene(preset: str) -> SceneConfig:
    """One of the four embedded presets."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("agvrnd").joinpath("presets", f"{preset}.scene").read_text(encoding="utf-8")
    return parse_scene(text, f"<preset {preset}>")


def resolve_scene(name_or_path: str) -> SceneConfig:
    """Preset name or path to a scene file."""
    if name_or_path in PRESETS:
        return make_scene(name_or_path)
    return load_scene(name_or_path)
