"""Command line entry point: ``agvrnd train | eval | export-scene``.

Failures print exactly one JSON line on stderr, e.g.
``{"error": "scene_file", "message": "scene.txt:4: unknown key 'foo'"}``,
and exit non-zero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from agvrnd.nn import CheckpointError
from agvrnd.scenefile import PRESETS, SceneFileError, make_scene, resolve_scene, save_scene
from agvrnd.trainer import (ConfigError, RunConfig, evaluate, parse_config_value, read_config_file,
                            run_training)


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, status=2)


# flags handled explicitly by `train`
_TRAIN_SPECIAL = {"scene", "rnd_enabled", "total_env_steps", "seed", "out_dir"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agvrnd", description="PPO / RND-PPO for planar AGV path planning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="train one agent")
    train.add_argument("--scene", help="preset name or scene file")
    train.add_argument("--rnd", choices=["on", "off"])
    train.add_argument("--steps", type=int, help="total environment steps")
    train.add_argument("--seed", type=int)
    train.add_argument("--out", help="output directory")
    train.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        if f.name not in _TRAIN_SPECIAL:
            train.add_argument(f"--{f.name.replace('_', '-')}", dest=f"override_{f.name}", metavar="VALUE")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--episodes", type=int, required=True)
    ev.add_argument("--deterministic", action="store_true")
    ev.add_argument("--seed", type=int, default=0)

    ex = sub.add_parser("export-scene", help="write a preset to an editable scene file")
    ex.add_argument("--preset", required=True, choices=PRESETS)
    ex.add_argument("--out", required=True)
    return parser


def _train_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        raw = getattr(args, f"override_{f.name}", None)
        if raw is not None:
            try:
                values[f.name] = parse_config_value(f.name, raw)
            except ValueError as exc:
                raise ConfigError(f"--{f.name.replace('_', '-')}: {exc}") from None
    if args.scene is not None:
        values["scene"] = args.scene
    if args.rnd is not None:
        values["rnd_enabled"] = args.rnd == "on"
    if args.steps is not None:
        values["total_env_steps"] = args.steps
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out_dir"] = args.out
    if not values.get("out_dir"):
        raise ConfigError("an output directory is required (--out or out_dir in the config file)")
    return RunConfig(**values)


def _cmd_train(args) -> int:
    config = _train_config(args)
    resolve_scene(config.scene)  # fail fast on a bad scene file

    def progress(row):
        logging.getLogger("agvrnd").info("steps=%d episodes=%d ext=%s len=%s", row.env_steps, row.episodes,
                                         row.mean_ext_reward, row.mean_ep_len)

    result = run_training(config, progress)
    last = result.rows[-1] if result.rows else None
    print(json.dumps({
        "out_dir": str(result.out_dir),
        "env_steps": last.env_steps if last else 0,
        "episodes": last.episodes if last else 0,
        "mean_ext_reward": last.mean_ext_reward if last else None,
        "steps_to_4.5": result.steps_to_threshold(4.5),
        "wall_seconds": round(result.wall_seconds, 3),
    }))
    return 0


def _cmd_eval(args) -> int:
    summary = evaluate(args.checkpoint, resolve_scene(args.scene), args.episodes, args.deterministic, args.seed)
    print(json.dumps(summary.__dict__))
    return 0


def _cmd_export(args) -> int:
    save_scene(make_scene(args.preset), args.out)
    print(json.dumps({"preset": args.preset, "out": args.out}))
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        handler = {"train": _cmd_train, "eval": _cmd_eval, "export-scene": _cmd_export}[args.command]
        return handler(args)
    except CliError as exc:
        err = exc
    except SceneFileError as exc:
        err = CliError("scene_file", str(exc))
    except ConfigError as exc:
        err = CliError("config", str(exc))
    except CheckpointError as exc:
        err = CliError("checkpoint", str(exc))
    except FileNotFoundError as exc:
        err = CliError("not_found", str(exc))
    except OSError as exc:
        err = CliError("io", str(exc))
    except ValueError as exc:
        err = CliError("invalid", str(exc))
    print(json.dumps({"error": err.code, "message": str(err)}), file=sys.stderr)
    return err.status


if __name__ == "__main__":
    sys.exit(main())
