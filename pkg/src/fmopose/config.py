"""Flat ``key = value`` run configuration with a typed schema.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment.  Keys are dotted names from :data:`SCHEMA`; unknown keys and values
that fail to parse are errors.  Every key has a default, so an empty file
is a valid config and :func:`dump_config` prints the complete set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .deblatting.params import FmSolverParams, HierarchySchedule
from .rotation import ConsensusParams, VelocityGrid


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_pair(text: str) -> tuple[int, int]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected two integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v

    parse.options = options
    return parse


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


_fm = FmSolverParams()
_grid = VelocityGrid()
_cons = ConsensusParams(window=16, min_dt=0.75, max_dt=1.25)

SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "seed for procedural scene content"),
    "jobs": Key(int, 1, "worker processes for per-frame stages"),
    # synth
    "scene.kind": Key(_choice("free_flight", "bounce", "zigzag", "static"), "free_flight", "scene builder"),
    "scene.averaging_factor": Key(int, 8, "sub-frames averaged into one output frame"),
    "scene.n_frames": Key(int, 0, "output frames; 0 keeps the builder's default length"),
    "scene.radius": Key(float, 0.0, "apparent radius at unit depth in pixels; 0 keeps the builder default"),
    "scene.canvas": Key(_int_pair, (0, 0), "rows cols; 0 0 keeps the builder default"),
    "scene.subsamples": Key(int, 8, "instants rendered per sub-frame"),
    "scene.bits": Key(int, 16, "PNG bit depth of written frames (8 or 16)"),
    # track inputs
    "input.frames": Key(str, "", "directory of frame_*.png"),
    "input.background": Key(str, "", "background PNG; empty uses a sliding median of the frames"),
    "background.window": Key(int, 5, "frames in the sliding median"),
    "trajectory.source": Key(_choice("file", "oracle", "estimate"), "file",
                             "2D trajectory: Curve2D JSON file, ground truth, or per-frame blur-kernel estimation"),
    "trajectory.file": Key(str, "", "Curve2D JSON (source = file)"),
    "trajectory.gt_dir": Key(str, "", "directory holding gt_trajectory.json (source = oracle)"),
    "radius.guess": Key(float, 0.0, "initial apparent radius in pixels; 0 derives it from the frame size"),
    "radius.passes": Key(int, 3, "template-free solves refining the radius of every frame"),
    "hierarchy.levels": Key(int, 3, "binary splitting levels L (2^L snapshots per frame)"),
    "output.dir": Key(str, "out", "output directory"),
    "fps": Key(float, 30.0, "frame rate of the input, recorded in outputs"),
    "superres.factor": Key(int, 8, "output frames per input frame"),
    # deblatting solver
    "solver.lam": Key(float, _fm.lam, "template weight"),
    "solver.alpha_f": Key(float, _fm.alpha_f, "total variation weight of the appearance"),
    "solver.lambda_r": Key(float, _fm.lambda_r, "rotational symmetry weight of the mask"),
    "solver.gamma_f": Key(float, _fm.gamma_f, "similarity weight of neighbouring appearances"),
    "solver.gamma_m": Key(float, _fm.gamma_m, "similarity weight of neighbouring masks"),
    "solver.admm_rho": Key(float, _fm.admm_rho, "initial ADMM penalty"),
    "solver.max_iters": Key(int, _fm.max_iters, "ADMM iteration cap"),
    "solver.tol": Key(float, _fm.tol, "relative residual tolerance"),
    # rotation grid and consensus
    "grid.n_axes": Key(int, _grid.n_axes, "candidate axes on the sphere"),
    "grid.delta": Key(float, _grid.delta, "rate step in rad/frame"),
    "grid.rate_max": Key(float, _grid.rate_max, "largest rate in rad/frame"),
    "consensus.rho": Key(float, _cons.rho, "inlier radius in rad/frame"),
    "consensus.epsilon": Key(float, _cons.epsilon, "vote score stabiliser"),
    "consensus.window": Key(int, _cons.window, "snapshots per velocity estimate"),
    "consensus.min_dt": Key(float, _cons.min_dt, "smallest pair time gap in frames"),
    "consensus.max_dt": Key(_opt_float, _cons.max_dt, "largest pair time gap in frames (none = unlimited)"),
    "consensus.coarse": Key(int, _cons.coarse, "rate stride of the first search pass"),
    "consensus.refine": Key(_bool, _cons.refine, "polish votes by local search"),
}


class Config(dict):
    """Mapping of every schema key to its typed value."""

    def fm_params(self) -> FmSolverParams:
        return FmSolverParams(**{k.split(".", 1)[1]: self[k] for k in self if k.startswith("solver.")})

    def schedule(self) -> HierarchySchedule:
        return HierarchySchedule(self["hierarchy.levels"])

    def grid(self) -> VelocityGrid:
        return VelocityGrid(self["grid.n_axes"], self["grid.delta"], self["grid.rate_max"])

    def consensus(self) -> ConsensusParams:
        return ConsensusParams(**{k.split(".", 1)[1]: self[k] for k in self if k.startswith("consensus.")})

    def dump(self) -> str:
        return dump_config(self)


def _validate(cfg: Config):
    for name in ("jobs", "scene.averaging_factor", "scene.subsamples", "background.window", "superres.factor"):
        if cfg[name] < 1:
            raise ConfigError(f"{name} must be >= 1")
    for name in ("scene.n_frames", "hierarchy.levels", "radius.passes"):
        if cfg[name] < 0:
            raise ConfigError(f"{name} must be >= 0")
    if cfg["scene.bits"] not in (8, 16):
        raise ConfigError("scene.bits must be 8 or 16")
    if cfg["scene.radius"] < 0 or cfg["radius.guess"] < 0:
        raise ConfigError("radii must be >= 0")
    if not (math.isfinite(cfg["fps"]) and cfg["fps"] > 0):
        raise ConfigError("fps must be positive")
    try:
        cfg.fm_params()
        cfg.schedule()
        cfg.consensus().check(cfg.grid())
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def make_config(values: dict | None = None) -> Config:
    """Defaults overridden by ``values`` (already typed or as strings)."""
    cfg = Config({k: spec.default for k, spec in SCHEMA.items()})
    for k, v in (values or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, str):
            try:
                v = SCHEMA[k].parse(v)
            except ValueError as exc:
                raise ConfigError(f"{k}: {exc}") from exc
        cfg[k] = v
    _validate(cfg)
    return cfg


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Read a config file (optional) and apply ``overrides`` on top."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config(p.read_text(), str(p)))
    values.update(overrides or {})
    return make_config(values)


def dump_config(cfg: dict | None = None) -> str:
    """Every key with its value and help text, readable back by :func:`load_config`."""
    cfg = make_config() if cfg is None else cfg
    lines = []
    for k, spec in SCHEMA.items():
        options = getattr(spec.parse, "options", None)
        note = spec.help + (f" [{' | '.join(options)}]" if options else "")
        lines.append(f"# {note}")
        lines.append(f"{k} = {_fmt(cfg[k])}")
    return "\n".join(lines) + "\n"
