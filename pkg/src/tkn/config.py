"""JSON run configuration: presets, schema validation, manifests.

A run config is one JSON object with ``data``, ``detector``, ``predictor``,
``prediction``, and ``training`` sections.  Missing fields fall back to the
shipped ``paper`` preset; unknown or mistyped fields are rejected with their
dotted path.  Every artifact-producing command writes a ``manifest.json``
(command, config echo, config hash, seed, versions) so runs can be
reproduced from the manifest alone.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import SpriteSceneConfig
from .detector import DetectorConfig, TrainConfig
from .errors import ConfigError
from .predictor import PredictorConfig, PredictorTrainConfig

PRESET_NAMES = ("paper", "desk", "sprite32")

_SCHEMA = {
    "name": str,
    "data": {
        "image_size": int, "channels": int, "num_sprites": int,
        "sprite_kinds": [str], "motion": str, "background": str,
        "sequence_length": int, "num_sequences": int, "num_test_sequences": int,
        "sprite_radius": float, "max_speed": float, "seed": int,
    },
    "detector": {
        "num_layers": int, "channels": [int], "strides": [int],
        "kernel_size": int, "num_keypoints": int, "sigma": float,
        "norm_groups": int, "leaky_slope": float,
    },
    "predictor": {
        "d_model": int, "d_k": int, "d_v": int, "d_inner": int, "n_head": int,
        "num_layers": int, "dropout": float, "representation": str,
    },
    "prediction": {"t": int, "horizon": int, "sequential_layers": int},
    "training": {
        "batch_size": int, "detector_epochs": int, "predictor_epochs": int,
        "lr": float, "beta1": float, "beta2": float, "max_pair_gap": int,
    },
}


def _check(value, spec, path: str) -> None:
    if isinstance(spec, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        unknown = set(value) - set(spec)
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
        for key, sub in spec.items():
            if key in value:
                _check(value[key], sub, f"{path}.{key}" if path else key)
        return
    if isinstance(spec, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        for i, item in enumerate(value):
            _check(item, spec[0], f"{path}[{i}]")
        return
    if spec is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        return
    if spec is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
        return
    if not isinstance(value, spec):
        raise ConfigError(path, f"expected {spec.__name__}, got {type(value).__name__}")


def validate_config(cfg: dict) -> None:
    _check(cfg, _SCHEMA, "")


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_preset(name: str) -> dict:
    if name not in PRESET_NAMES:
        raise ConfigError("config", f"unknown preset {name!r}; "
                          f"choose from {', '.join(PRESET_NAMES)}")
    text = importlib.resources.files("tkn").joinpath(f"presets/{name}.json").read_text()
    return json.loads(text)


def load_config(source: str | Path) -> dict:
    """Resolve a preset name or JSON file into a validated full config."""
    source = str(source)
    if source in PRESET_NAMES:
        user = load_preset(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError("config", f"no such preset or file: {source}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {source}: {exc}") from exc
    validate_config(user)
    merged = _deep_merge(load_preset("paper"), user)
    validate_config(merged)
    # constructing the typed configs applies the cross-field checks
    detector_config(merged)
    predictor_config(merged)
    scene_config(merged)
    return merged


def config_sha256(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# -- typed views ------------------------------------------------------------


def detector_config(cfg: dict) -> DetectorConfig:
    d = cfg["detector"]
    return DetectorConfig(
        height=cfg["data"]["image_size"], width=cfg["data"]["image_size"],
        channels_in=cfg["data"]["channels"], num_layers=d["num_layers"],
        channels=tuple(d["channels"]), strides=tuple(d["strides"]),
        kernel_size=d["kernel_size"], num_keypoints=d["num_keypoints"],
        sigma=d["sigma"], norm_groups=d["norm_groups"], leaky_slope=d["leaky_slope"],
    )


def predictor_config(cfg: dict) -> PredictorConfig:
    p = cfg["predictor"]
    return PredictorConfig(
        num_keypoints=cfg["detector"]["num_keypoints"], d_model=p["d_model"],
        d_k=p["d_k"], d_v=p["d_v"], d_inner=p["d_inner"], n_head=p["n_head"],
        num_layers=p["num_layers"], seq_len=cfg["prediction"]["t"],
        dropout=p["dropout"], representation=p["representation"],
    )


def scene_config(cfg: dict, seed: int | None = None) -> SpriteSceneConfig:
    d = dict(cfg["data"])
    if seed is not None:
        d["seed"] = seed
    d["sprite_kinds"] = tuple(d["sprite_kinds"])
    return SpriteSceneConfig(**d)


def detector_train_config(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(epochs=t["detector_epochs"], batch_size=t["batch_size"],
                       lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"],
                       max_pair_gap=t["max_pair_gap"])


def predictor_train_config(cfg: dict) -> PredictorTrainConfig:
    t = cfg["training"]
    return PredictorTrainConfig(epochs=t["predictor_epochs"],
                                batch_size=t["batch_size"], lr=t["lr"],
                                beta1=t["beta1"], beta2=t["beta2"])


# -- manifests ----------------------------------------------------------------


def write_manifest(path: str | Path, command: str, cfg: dict, seed: int,
                   outputs: list[str] | None = None) -> Path:
    """Record what produced an artifact (no timestamps, so identical runs
    produce identical files).  ``path`` is the manifest file itself."""
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": config_sha256(cfg),
        "seed": seed,
        "outputs": outputs or [],
        "versions": {
            "tkn": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path
