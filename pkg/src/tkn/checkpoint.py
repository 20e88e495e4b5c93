"""Binary checkpoint format (magic ``TKNC``).

Layout: ``b"TKNC" | u32 version | u64 header_len | header JSON | payload``.
The header carries the config echo, the named-tensor table (name, dtype,
shape, offset into the payload), and the segment map (``detector``,
``predictor``, ``mappings``).  Tensors are stored little-endian in table
order, so loading a file and saving it back reproduces it byte for byte.
Writes are atomic (temp file + rename) and guarded by a file lock.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from .errors import FormatError

MAGIC = b"TKNC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}

SEGMENTS = ("detector", "predictor", "mappings")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]  # insertion order == payload order
    segments: dict[str, list[str]]
    version: int = VERSION


def write_checkpoint(path: str | Path, config: dict,
                     tensors: dict[str, np.ndarray],
                     segments: dict[str, list[str]]) -> None:
    listed = [name for names in segments.values() for name in names]
    if sorted(listed) != sorted(tensors):
        raise ValueError("segment map does not cover the tensor table exactly")

    table = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = "<f8" if arr.dtype == np.float64 else "<f4" if arr.dtype == np.float32 else None
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = arr.astype(_DTYPES[code], copy=False).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps(
        {"config": config, "tensors": table, "segments": segments},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    path = Path(path)
    with FileLock(str(path) + ".lock"):
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: file ends at byte {len(blob)}, "
                          f"prefix needs {_PREFIX.size}")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header_end = _PREFIX.size + header_len
    if len(blob) < header_end:
        raise FormatError(f"{path}: header truncated at byte {len(blob)}")
    try:
        header = json.loads(blob[_PREFIX.size:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    payload = blob[header_end:]
    for row in header["tensors"]:
        dtype = _DTYPES.get(row["dtype"])
        if dtype is None:
            raise FormatError(f"{path}: tensor {row['name']!r} has unknown "
                              f"dtype {row['dtype']!r}")
        shape = tuple(row["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = row["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise FormatError(
                f"{path}: tensor {row['name']!r} extends to payload byte {end}, "
                f"file has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=count,
                            offset=row["offset"]).reshape(shape).copy()
        tensors[row["name"]] = arr
    return Checkpoint(header["config"], tensors, header["segments"], version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    write_checkpoint(path, ckpt.config, ckpt.tensors, ckpt.segments)


# ---------------------------------------------------------------------------
# model-aware packing


def named_model_tensors(detector=None, parallel=None, sequential=None):
    """Stable checkpoint names for every model parameter.

    Mapping matrices live in the ``mappings`` segment; everything else goes
    under ``detector`` or ``predictor``.
    """
    return {name: t.data
            for name, t in _named_tensor_objects(detector, parallel, sequential)}


def _segment_map(names) -> dict[str, list[str]]:
    segments: dict[str, list[str]] = {seg: [] for seg in SEGMENTS}
    for name in names:
        seg = name.split("/", 1)[0]
        if seg not in segments:
            raise ValueError(f"tensor {name!r} has no recognized segment prefix")
        segments[seg].append(name)
    return {seg: names_ for seg, names_ in segments.items() if names_}


def save_models(path: str | Path, config: dict, detector=None,
                parallel=None, sequential=None) -> None:
    tensors = named_model_tensors(detector, parallel, sequential)
    write_checkpoint(path, config, tensors, _segment_map(tensors))


def load_models(path: str | Path):
    """Rebuild models from the config echo and fill in stored tensors.

    Returns ``(checkpoint, detector, parallel, sequential)``; predictors are
    None when their segment is absent.  Every stored tensor must match the
    shape the config echo implies, and every rebuilt parameter must be
    present in the file.
    """
    from . import config as config_mod
    from .detector import KeypointDetector
    from .predictor import ParallelPredictor, SequentialPredictor

    ckpt = read_checkpoint(path)
    cfg = ckpt.config
    rng = np.random.default_rng(0)  # placeholder values, overwritten below

    detector = None
    parallel = None
    sequential = None
    if any(n.startswith("detector/") for n in ckpt.tensors):
        detector = KeypointDetector(config_mod.detector_config(cfg), rng)
    if any(n.startswith("predictor/parallel/") for n in ckpt.tensors):
        parallel = ParallelPredictor(config_mod.predictor_config(cfg), rng)
    if any(n.startswith("predictor/sequential/") for n in ckpt.tensors):
        sequential = SequentialPredictor(
            config_mod.predictor_config(cfg),
            horizon=int(cfg["prediction"]["horizon"]),
            rng=rng,
            layers_per_step=int(cfg["prediction"]["sequential_layers"]),
        )

    expected = {
        name: t for name, t in _named_tensor_objects(detector, parallel, sequential)
    }
    stored = set(ckpt.tensors)
    missing = sorted(set(expected) - stored)
    extra = sorted(stored - set(expected))
    if missing or extra:
        raise FormatError(
            f"{path}: tensor table does not match config echo "
            f"(missing {missing[:4]}, unexpected {extra[:4]})"
        )
    for name, tensor in expected.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise FormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, "
                f"config echo implies {tensor.data.shape}"
            )
        tensor.data = arr.astype(np.float64, copy=True)
    return ckpt, detector, parallel, sequential


def _named_tensor_objects(detector, parallel, sequential):
    if detector is not None:
        for n, t in detector.named_params():
            yield f"detector/{n}", t
    for tag, model in (("parallel", parallel), ("sequential", sequential)):
        if model is None:
            continue
        for n, t in model.named_params():
            if n.startswith("mapper/"):
                yield f"mappings/{tag}/{n[len('mapper/'):]}", t
            else:
                yield f"predictor/{tag}/{n}", t
