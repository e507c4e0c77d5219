"""Run configuration: nested defaults, strict merging and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .bev import BEV_DEFAULTS
from .cluster import ClusterConfig
from .geometry import ConfigError
from .head import HEAD_DEFAULTS
from .lifting import LIFT_DEFAULTS
from .scene import SCENE_DEFAULTS

# Desk-scale run defaults; ClusterConfig() itself carries the full-scale ones.
MVACON_DEFAULTS = {
    "clusters": 16,
    "heads": 2,
    "clustering_op": "conv",
    "cross_level": True,
    "layers": 2,
    "enabled": True,
}

BENCH_DEFAULTS = {
    "sizes": [1024, 2048, 4096, 8192],
    "clusters": 100,
    "channels": 64,
    "heads": 1,
    "reps": 5,
    "seed": 0,
}

DEFAULTS = {
    "scene": SCENE_DEFAULTS,
    "model": {
        "channels": 16,
        "strides": [4, 8, 16],
        "mvacon": MVACON_DEFAULTS,
        "lift": LIFT_DEFAULTS,
        "head": dict(HEAD_DEFAULTS, heads=2, two_frame=True),
        "bev": BEV_DEFAULTS,
    },
    "training": {"steps": 200, "lr": 1e-2, "seed": 0},
    "bench": BENCH_DEFAULTS,
    "output": "runs/default",
}

# Dict-valued leaves that are replaced wholesale rather than merged key by key.
_OPAQUE = {("scene", "range")}


def _merge(base: dict, over: dict, path: tuple[str, ...] = ()) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            dotted = ".".join(path + (key,))
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and path + (key,) not in _OPAQUE:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {'.'.join(path + (key,))!r} must be an object")
            out[key] = _merge(base[key], val, path + (key,))
        else:
            out[key] = copy.deepcopy(val)
    return out


def make_config(overrides: dict | None = None) -> dict:
    """Defaults with ``overrides`` merged in; unknown keys raise :class:`ConfigError`."""
    cfg = _merge(DEFAULTS, overrides or {})
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m = cfg["model"]
    ClusterConfig.from_json(m["mvacon"]).check_width(m["channels"])
    if m["lift"]["mode"] not in ("petr", "bevformer"):
        raise ConfigError("lift.mode must be 'petr' or 'bevformer'")
    if m["lift"]["layers"] < 1 or m["head"]["layers"] < 1:
        raise ConfigError("layer counts must be >= 1")
    if m["lift"]["mode"] == "petr" and not 0 <= m["lift"]["petr_level"] < len(m["strides"]):
        raise ConfigError("lift.petr_level out of range")
    if cfg["scene"]["objects"] > m["head"]["queries"]:
        raise ConfigError("more scene objects than object queries")
    if cfg["training"]["steps"] < 0 or cfg["training"]["lr"] <= 0:
        raise ConfigError("training.steps must be >= 0 and training.lr > 0")


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return make_config()
    with open(path) as fh:
        return make_config(json.load(fh))


def config_hash(cfg: dict) -> str:
    """Short digest of everything except the output location."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_config(cfg: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
