"""Layered run configuration: profile defaults < config file < environment < flags.

The config file is flat ``key = value`` lines (``#`` comments allowed), for
example::

    train.epochs = 30
    train.loss = cosface
    eval.fpr = 1e-2, 1e-3

Environment variables use the ``STEREOFACE_`` prefix with the first
underscore standing for the dot: ``STEREOFACE_TRAIN_BASE_LR=0.02``.
Unknown keys are rejected at every layer.
"""

from __future__ import annotations

import configparser
import json
import os
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "STEREOFACE_"
PROFILES = ("desk", "paper")

_DESK: dict[str, Any] = {
    "data.subjects": 130, "data.samples_min": 20, "data.samples_max": 30, "data.seed": 0,
    "data.train_fraction": 0.75, "data.train_subjects": 0, "data.grid_size": 96,
    "rig.focal": 140.0, "rig.baseline": 0.03, "rig.scene_w": 192, "rig.scene_h": 108,
    "crop.frame": 36, "crop.train_crop": 32, "crop.margin": 0.35, "crop.jitter_px": 1.0,
    "train.epochs": 30, "train.batch": 0, "train.base_lr": 0.01, "train.drop_every": 20,
    "train.factor": 0.1, "train.weight_decay": 0.0005, "train.momentum": 0.9, "train.seed": 0,
    "train.loss": "cosface", "train.scale": 16.0, "train.margin": -1.0,
    "train.aux": "off", "train.alpha": 50.0, "train.beta": 1.0,
    "train.stage_filters": [8, 16, 32, 64], "train.blocks_per_stage": [1, 2, 4, 1], "train.embed_dim": 64,
    "train.norm": "none", "train.pool": "avg", "train.clip_norm": 10.0,
    "eval.fpr": [1e-2, 1e-3, 1e-4], "eval.fusion": "mean", "eval.shard_rows": 512, "eval.bin_width": 5.0,
    "spoof.seed": 0, "spoof.fraction": 1.0, "spoof.epochs": 12, "spoof.threshold": 0.5,
    "threads": 0,
}
_PAPER_OVERRIDES: dict[str, Any] = {
    "data.subjects": 4830, "data.train_subjects": 1460,
    "rig.focal": 1400.0, "rig.scene_w": 1920, "rig.scene_h": 1080,
    "crop.frame": 144, "crop.train_crop": 128,
    "train.epochs": 100, "train.drop_every": 20, "train.scale": 30.0,
    "train.stage_filters": [64, 128, 256, 512], "train.embed_dim": 512,
    "eval.fpr": [1e-5, 2e-6, 1e-6],
}
KEYS = frozenset(_DESK)


def profile_defaults(profile: str) -> dict[str, Any]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {', '.join(PROFILES)}")
    d = dict(_DESK)
    if profile == "paper":
        d.update(_PAPER_OVERRIDES)
    return d


def _coerce(key: str, value: Any, like: Any) -> Any:
    """Convert ``value`` (often a string) to the type of the default ``like``."""
    try:
        if isinstance(like, list):
            items = value if isinstance(value, (list, tuple)) else [v for v in str(value).replace(";", ",").split(",") if v.strip()]
            kind = type(like[0]) if like else float
            return [kind(float(v)) if kind is int else kind(v) for v in items]
        if isinstance(like, bool):
            if isinstance(value, str):
                if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if isinstance(like, int):
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if isinstance(like, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".json":
        try:
            return dict(json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string("[top]\n" + p.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return dict(parser["top"])


def from_env(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest in ("profile", "config"):
            continue
        key = rest if rest in KEYS else rest.replace("_", ".", 1)
        if key not in KEYS:
            raise ConfigError(f"unknown setting from environment: {name}")
        out[key] = value
    return out


class Config(Mapping[str, Any]):
    def __init__(self, values: dict[str, Any], profile: str, sources: dict[str, str]):
        self._values = values
        self.profile = profile
        self.sources = sources

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def to_json(self) -> dict:
        return {"profile": self.profile, "values": dict(sorted(self._values.items())),
                "sources": dict(sorted(self.sources.items()))}

    def write(self, out_dir, name: str = "config.resolved.json") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        return path


def resolve(profile: str = "desk", file=None, flags: Mapping[str, Any] | None = None,
            environ: Mapping[str, str] | None = None) -> Config:
    values = profile_defaults(profile)
    sources = {k: f"profile:{profile}" for k in values}
    layers = []
    if file is not None:
        layers.append((f"file:{file}", read_file(file)))
    layers.append(("env", from_env(environ)))
    layers.append(("flag", {k: v for k, v in (flags or {}).items() if v is not None}))
    for source, layer in layers:
        for key, value in layer.items():
            if key not in KEYS:
                raise ConfigError(f"unknown setting {key!r} ({source})")
            values[key] = _coerce(key, value, _DESK[key])
            sources[key] = source
    return Config(values, profile, sources)


# ---------------------------------------------------------------- builders


def rig_from(cfg: Config):
    from .facegen.render import CameraRig

    return CameraRig(focal=cfg["rig.focal"], baseline=cfg["rig.baseline"], scene_w=cfg["rig.scene_w"],
                     scene_h=cfg["rig.scene_h"])


def crop_from(cfg: Config):
    from .pipeline import CropSpec

    try:
        return CropSpec(cfg["crop.frame"], cfg["crop.train_crop"], cfg["crop.margin"], cfg["crop.jitter_px"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def gen_config_from(cfg: Config):
    from .facegen.dataset import GenConfig

    return GenConfig(subjects=cfg["data.subjects"], samples_min=cfg["data.samples_min"],
                     samples_max=cfg["data.samples_max"], seed=cfg["data.seed"], rig=rig_from(cfg),
                     train_fraction=cfg["data.train_fraction"],
                     train_subjects=cfg["data.train_subjects"] or None, grid_size=cfg["data.grid_size"],
                     workers=cfg["threads"] or 1)


def train_config_from(cfg: Config, mode: str):
    from .recognet import AuxConfig, MarginConfig
    from .trainkit import TrainConfig

    aux_kind = cfg["train.aux"]
    if aux_kind == "off":
        aux = None
    elif aux_kind == "l1":
        aux = AuxConfig(alpha=0.0, beta=cfg["train.beta"])
    elif aux_kind == "full":
        aux = AuxConfig(alpha=cfg["train.alpha"], beta=cfg["train.beta"])
    else:
        raise ConfigError(f"train.aux must be off, l1 or full (got {aux_kind!r})")
    if cfg["train.loss"] not in ("cosface", "arcface"):
        raise ConfigError(f"train.loss must be cosface or arcface (got {cfg['train.loss']!r})")
    margin = MarginConfig(cfg["train.loss"], cfg["train.scale"],
                          None if cfg["train.margin"] < 0 else cfg["train.margin"])
    return TrainConfig(mode=mode, epochs=cfg["train.epochs"], batch=cfg["train.batch"] or None,
                       base_lr=cfg["train.base_lr"], drop_every=cfg["train.drop_every"],
                       factor=cfg["train.factor"], weight_decay=cfg["train.weight_decay"],
                       momentum=cfg["train.momentum"], seed=cfg["train.seed"], margin=margin, aux=aux,
                       stage_filters=tuple(cfg["train.stage_filters"]),
                       blocks_per_stage=tuple(cfg["train.blocks_per_stage"]), embed_dim=cfg["train.embed_dim"],
                       norm=cfg["train.norm"], pool=cfg["train.pool"],
                       clip_norm=cfg["train.clip_norm"] if cfg["train.clip_norm"] > 0 else None,
                       crop=crop_from(cfg))
