"""Checkpoints: one blob of little-endian float32 plus a JSON manifest.

``best.ckpt`` holds every tensor back to back; ``best.ckpt.json`` records the
format version, the training config, the epoch and validation F1 at save
time, and a table of ``{name, shape, offset}`` (offset in bytes).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import DetectorModel, TrainConfig, build_model
from .formats import FormatError, atomic_write_bytes, read_json, write_json
from .tensor_nn import ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class CheckpointInfo:
    config: TrainConfig
    epoch: int
    val_f1: float


def manifest_path(path) -> Path:
    return Path(f"{path}.json")


def save_checkpoint(path, model: DetectorModel, config: TrainConfig, epoch: int, val_f1: float) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in model.named_tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    atomic_write_bytes(path, b"".join(chunks))
    write_json(manifest_path(path), {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "epoch": int(epoch),
        "val_f1": float(val_f1),
        "tensors": table,
    })


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta_file = manifest_path(path)
    if not meta_file.exists():
        raise FormatError(f"missing checkpoint manifest {meta_file}")
    meta = read_json(meta_file)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {meta.get('format_version')!r}")
    blob = Path(path).read_bytes()
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        start = int(entry["offset"])
        if start + n > len(blob):
            raise FormatError(f"tensor {entry['name']!r} runs past the end of {path}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start).reshape(shape)
    return meta, tensors


def load_checkpoint(path) -> tuple[DetectorModel, CheckpointInfo]:
    """Rebuild the model from the stored config and load its tensors.

    Raises ``ShapeError`` naming the first tensor whose shape or presence
    disagrees with the architecture.
    """
    meta, tensors = read_tensors(path)
    config = TrainConfig.from_dict(meta["config"])
    model = build_model(config)
    try:
        model.load_tensors(tensors)
    except ShapeError as exc:
        raise ShapeError(f"{path}: {exc}") from None
    return model, CheckpointInfo(config, int(meta["epoch"]), float(meta["val_f1"]))
