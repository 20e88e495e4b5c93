"""Synthetic sprite videos with known keypoint ground truth.

Scenes are a pure function of (config, seed): each sequence derives its own
counter-based substream, so datasets are bitwise reproducible and sequences
may be generated independently.  Sprite centers are recorded per frame in
the same normalized [-1, 1] coordinates the detector produces (x along
width, y along height).  Pixels live in [0, 1]; 8-bit only at PNG export.

Sequences persist in ``.tknseq`` files: a fixed little-endian header (magic,
version, dtype, frame dims, track count) followed by the raw frame payload
and the ground-truth tracks.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

_MAGIC = b"TKNS"
_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_HEADER = struct.Struct("<4sHBBIIIII")  # magic, version, dtype, pad, T, C, H, W, n_sprites

SPRITE_KINDS = ("disk", "square", "cross")
MOTION_MODELS = ("bounce", "linear", "sinusoidal")
BACKGROUNDS = ("flat", "gradient", "drift")


@dataclass(frozen=True)
class SpriteSceneConfig:
    image_size: int = 32
    channels: int = 1
    num_sprites: int = 2
    sprite_kinds: tuple[str, ...] = ("disk", "disk")
    motion: str = "bounce"
    background: str = "flat"
    sequence_length: int = 20
    num_sequences: int = 500
    num_test_sequences: int = 50
    sprite_radius: float = 3.5  # pixels
    max_speed: float = 1.5  # pixels per frame
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sprite_kinds", tuple(self.sprite_kinds))
        if self.channels not in (1, 3):
            raise ConfigError("data.channels", "must be 1 or 3")
        if not 1 <= self.num_sprites <= 4:
            raise ConfigError("data.num_sprites", "must be in [1, 4]")
        if len(self.sprite_kinds) != self.num_sprites:
            raise ConfigError("data.sprite_kinds",
                              f"expected {self.num_sprites} kinds, got {len(self.sprite_kinds)}")
        for kind in self.sprite_kinds:
            if kind not in SPRITE_KINDS:
                raise ConfigError("data.sprite_kinds", f"unknown kind {kind!r}")
        if self.motion not in MOTION_MODELS:
            raise ConfigError("data.motion", f"unknown model {self.motion!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigError("data.background", f"unknown background {self.background!r}")
        if self.sequence_length < 2:
            raise ConfigError("data.sequence_length", "must be >= 2")
        if 2 * self.sprite_radius + 2 >= self.image_size:
            raise ConfigError("data.sprite_radius",
                              f"sprite diameter {2 * self.sprite_radius} does not fit "
                              f"in a {self.image_size}px frame")


@dataclass
class SpriteDataset:
    config: SpriteSceneConfig
    sequences: list[np.ndarray]  # each [T, C, H, W] in [0, 1]
    tracks: list[np.ndarray]  # each [T, num_sprites, 2] normalized (x, y)


def _sprite_profile(kind: str, dx: np.ndarray, dy: np.ndarray, radius: float) -> np.ndarray:
    """Intensity in [0, 1], peaked at the center so argmax lands on it."""
    r2 = (dx * dx + dy * dy) / (radius * radius)
    if kind == "disk":
        inside = r2 <= 1.0
        return np.where(inside, 1.0 - 0.4 * r2, 0.0)
    if kind == "square":
        cheb = np.maximum(np.abs(dx), np.abs(dy)) / radius
        return np.where(cheb <= 1.0, 1.0 - 0.4 * cheb * cheb, 0.0)
    # cross: union of a horizontal and a vertical bar
    arm = radius / 3.0
    horiz = (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
    vert = (np.abs(dx) <= arm) & (np.abs(dy) <= radius)
    return np.where(horiz | vert, 1.0 - 0.4 * r2.clip(0.0, 1.0), 0.0)


def _background(config: SpriteSceneConfig, t: int, phase: float) -> np.ndarray:
    size = config.image_size
    if config.background == "flat":
        return np.zeros((size, size))
    ramp = np.linspace(0.05, 0.25, size)[None, :] * np.ones((size, 1))
    if config.background == "gradient":
        return ramp
    # drift: the ramp's brightness breathes slowly over time
    return ramp * (1.0 + 0.3 * np.sin(2.0 * np.pi * t / 40.0 + phase))


def _simulate_centers(config: SpriteSceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Pixel-coordinate centers [T, S, 2] as (col, row) floats."""
    size, t_len, s = config.image_size, config.sequence_length, config.num_sprites
    margin = config.sprite_radius
    lo, hi = margin, size - 1 - margin
    pos = rng.uniform(lo, hi, size=(s, 2))
    if config.motion == "sinusoidal":
        amp = rng.uniform(0.1, 0.45, size=(s, 2)) * (hi - lo) / 2.0
        omega = rng.uniform(0.15, 0.5, size=(s, 2))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(s, 2))
        center = rng.uniform(lo + amp.max(axis=1, keepdims=True),
                             hi - amp.max(axis=1, keepdims=True), size=(s, 2))
        frames = np.arange(t_len)[:, None, None]
        return center[None] + amp[None] * np.sin(omega[None] * frames + phase[None])
    speed = rng.uniform(0.3, 1.0, size=(s, 1)) * config.max_speed
    angle = rng.uniform(0.0, 2.0 * np.pi, size=(s, 1))
    vel = np.concatenate([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    out = np.empty((t_len, s, 2))
    cur = pos.copy()
    for t in range(t_len):
        out[t] = cur
        cur = cur + vel
        if config.motion == "bounce":
            for axis in range(2):
                under = cur[:, axis] < lo
                over = cur[:, axis] > hi
                cur[under, axis] = 2 * lo - cur[under, axis]
                vel[under, axis] *= -1.0
                cur[over, axis] = 2 * hi - cur[over, axis]
                vel[over, axis] *= -1.0
        else:  # linear: clamp instead of bouncing (stays inside, motion stays affine)
            cur = cur.clip(lo, hi)
    return out


def _render_sequence(config: SpriteSceneConfig, centers: np.ndarray,
                     colors: np.ndarray, phase: float) -> np.ndarray:
    size, t_len = config.image_size, config.sequence_length
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = np.empty((t_len, config.channels, size, size))
    for t in range(t_len):
        canvas = np.repeat(_background(config, t, phase)[None], config.channels, axis=0)
        for s in range(config.num_sprites):
            cx, cy = centers[t, s]
            mask = _sprite_profile(config.sprite_kinds[s], xx - cx, yy - cy,
                                   config.sprite_radius)
            canvas = np.maximum(canvas, colors[s][:, None, None] * mask[None])
        frames[t] = canvas
    return frames.clip(0.0, 1.0)


def _to_normalized(centers: np.ndarray, size: int) -> np.ndarray:
    return 2.0 * centers / (size - 1) - 1.0


def generate_sequence(config: SpriteSceneConfig, stream: int,
                      index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (frames, track) pair from substream (seed, stream, index)."""
    rng = np.random.default_rng([config.seed, stream, index])
    centers = _simulate_centers(config, rng)
    if config.channels == 3:
        colors = rng.uniform(0.6, 1.0, size=(config.num_sprites, 3))
    else:
        colors = np.ones((config.num_sprites, 1))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    frames = _render_sequence(config, centers, colors, phase)
    return frames, _to_normalized(centers, config.image_size)


def generate_dataset(config: SpriteSceneConfig, split: str = "train",
                     num_sequences: int | None = None) -> SpriteDataset:
    """Deterministic dataset; train and test splits use disjoint substreams."""
    streams = {"train": 0, "test": 1}
    if split not in streams:
        raise ValueError(f"split must be one of {sorted(streams)}, got {split!r}")
    if num_sequences is None:
        count = config.num_sequences if split == "train" else config.num_test_sequences
    else:
        count = num_sequences
    sequences, tracks = [], []
    for i in range(count):
        frames, track = generate_sequence(config, streams[split], i)
        sequences.append(frames)
        tracks.append(track)
    return SpriteDataset(config, sequences, tracks)


# ---------------------------------------------------------------------------
# persistence


def save_sequence(path: str | Path, frames: np.ndarray,
                  track: np.ndarray | None = None) -> None:
    """Write one sequence (and optional track) to a ``.tknseq`` file."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be [T, C, H, W], got {frames.shape}")
    code = 0 if frames.dtype == np.float64 else 1 if frames.dtype == np.float32 else None
    if code is None:
        raise ValueError(f"unsupported dtype {frames.dtype}; use float64 or float32")
    t, c, h, w = frames.shape
    n_sprites = 0
    track_bytes = b""
    if track is not None:
        track = np.asarray(track, dtype=np.float64)
        if track.shape[0] != t or track.ndim != 3 or track.shape[2] != 2:
            raise ValueError(f"track must be [T, S, 2] matching T={t}, got {track.shape}")
        n_sprites = track.shape[1]
        track_bytes = track.astype("<f8").tobytes()
    header = _HEADER.pack(_MAGIC, _VERSION, code, 0, t, c, h, w, n_sprites)
    payload = frames.astype(_DTYPES[code]).tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + payload + track_bytes)
    os.replace(tmp, path)


def load_sequence(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read back (frames, track-or-None); rejects corrupt or truncated files."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file ends at byte {len(blob)}, "
                          f"header needs {_HEADER.size}")
    magic, version, code, _, t, c, h, w, n_sprites = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 6")
    dtype = _DTYPES[code]
    frame_bytes = t * c * h * w * dtype.itemsize
    track_bytes = t * n_sprites * 2 * 8
    expected = _HEADER.size + frame_bytes + track_bytes
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)} "
                          f"(payload truncated at byte {len(blob)})")
    frames = np.frombuffer(blob, dtype=dtype, count=t * c * h * w,
                           offset=_HEADER.size).reshape(t, c, h, w).copy()
    track = None
    if n_sprites:
        track = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size + frame_bytes)
        track = track.reshape(t, n_sprites, 2).copy()
    return frames, track


def save_dataset(directory: str | Path, dataset: SpriteDataset,
                 split: str = "train") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (frames, track) in enumerate(zip(dataset.sequences, dataset.tracks)):
        name = f"{split}_{i:05d}.tknseq"
        save_sequence(directory / name, frames, track)
        names.append(name)
    index_path = directory / f"{split}_index.json"
    tmp = Path(str(index_path) + ".tmp")
    tmp.write_text(json.dumps({"split": split, "files": names}, indent=2))
    os.replace(tmp, index_path)


def load_dataset(directory: str | Path, config: SpriteSceneConfig,
                 split: str = "train") -> SpriteDataset:
    directory = Path(directory)
    index = json.loads((directory / f"{split}_index.json").read_text())
    sequences, tracks = [], []
    for name in index["files"]:
        frames, track = load_sequence(directory / name)
        sequences.append(frames)
        tracks.append(track)
    return SpriteDataset(config, sequences, tracks)


def export_png(directory: str | Path, frames: np.ndarray, prefix: str = "frame") -> list[Path]:
    """Dump frames as 8-bit PNGs (requires Pillow)."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        arr = (np.clip(frame, 0.0, 1.0) * 255).round().astype(np.uint8)
        img = Image.fromarray(arr[0] if frame.shape[0] == 1 else arr.transpose(1, 2, 0))
        out = directory / f"{prefix}_{i:04d}.png"
        img.save(out)
        paths.append(out)
    return paths
