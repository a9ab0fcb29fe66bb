"""INI-style run configuration mapped onto :class:`HyperConfig`.

Example::

    [train]
    mode = lava-last-layer
    task = sine
    support = 10
    epochs = 200

    [model]
    hidden = 64, 64, 64

Command-line overrides are applied on top of the file, and the fully
resolved configuration is what gets echoed into the run manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
import platform
import time
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .errors import ConfigError
from .training import HyperConfig

OUTPUT_DIR_ENV = "LAVA_OUTPUT_DIR"


def _int_tuple(text: str) -> tuple[int, ...]:
    parts = [p for p in str(text).replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _optional_float(text: str) -> float | None:
    t = str(text).strip().lower()
    return None if t in ("", "none", "off") else float(t)


# (section, key) -> (HyperConfig field, parser)
FIELDS: dict[tuple[str, str], tuple[str, Callable[[str], Any]]] = {
    ("train", "mode"): ("mode", str),
    ("train", "task"): ("task", str),
    ("train", "alpha"): ("alpha", float),
    ("train", "outer_lr"): ("outer_lr", float),
    ("train", "eps"): ("eps", float),
    ("train", "support"): ("n_support", int),
    ("train", "query"): ("n_query", int),
    ("train", "meta_batch"): ("meta_batch", int),
    ("train", "epochs"): ("epochs", int),
    ("train", "batches_per_epoch"): ("batches_per_epoch", int),
    ("train", "inner_steps"): ("inner_steps", int),
    ("train", "seed"): ("seed", int),
    ("train", "clip_norm"): ("clip_norm", _optional_float),
    ("model", "hidden"): ("hidden", _int_tuple),
    ("model", "context_dim"): ("context_dim", int),
    ("eval", "tasks"): ("eval_tasks", int),
    ("eval", "seeds"): ("eval_seeds", _int_tuple),
}
BY_FIELD = {f: (sec, key, parse) for (sec, key), (f, parse) in FIELDS.items()}


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a config file into HyperConfig keyword arguments.

    A run's ``manifest.json`` is accepted too; its embedded config is used.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            text = json.loads(text)["config_ini"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path}: not a run manifest with an embedded config") from None
        if text is None:
            raise ConfigError(f"{path}: manifest carries no config")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[str, Any] = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            spec = FIELDS.get((section, key))
            if spec is None:
                raise ConfigError(f"{path}: unknown setting {section}.{key}")
            name, parse = spec
            try:
                out[name] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: {section}.{key}: cannot parse {raw!r} ({exc})") from None
    return out


def resolve(config_path: str | Path | None, overrides: Mapping[str, Any]) -> HyperConfig:
    values: dict[str, Any] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return HyperConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def to_ini(cfg: HyperConfig) -> str:
    cp = configparser.ConfigParser()
    for f in dataclasses.fields(cfg):
        sec, key, _ = BY_FIELD[f.name]
        if not cp.has_section(sec):
            cp.add_section(sec)
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        cp.set(sec, key, "none" if v is None else str(v))
    from io import StringIO

    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()


def output_dir(explicit: str | None, command: str) -> Path:
    if explicit:
        base = Path(explicit)
    elif os.environ.get(OUTPUT_DIR_ENV):
        base = Path(os.environ[OUTPUT_DIR_ENV])
    else:
        base = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    base.mkdir(parents=True, exist_ok=True)
    return base


def write_manifest(out: Path, command: str, cfg: HyperConfig | None, extra: Mapping[str, Any] | None = None) -> Path:
    """Record the resolved run before any computation starts."""
    from . import __version__

    manifest = {
        "command": command,
        "config": None if cfg is None else cfg.to_dict(),
        "seed": None if cfg is None else cfg.seed,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "output_dir": str(out.resolve()),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config_ini": None if cfg is None else to_ini(cfg),
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=list) + "\n", encoding="utf-8")
    return path


def finish_manifest(out: Path, **fields: Any) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest.update(fields)
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path.write_text(json.dumps(manifest, indent=2, default=list) + "\n", encoding="utf-8")
