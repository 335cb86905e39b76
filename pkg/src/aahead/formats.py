"""On-disk formats: raw f32 images with JSON sidecars, dataset manifests, checkpoints.

Images are raw little-endian float32 arrays; ``<file>.json`` next to each one
holds ``{"dtype": "f32le", "shape": [H, W]}``.  Every JSON document is written
with sorted keys and two-space indentation so identical content produces
identical bytes.  Writes go to a temporary file that is then renamed.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, canonical_json(obj).encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_image(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    atomic_write_bytes(path, array.astype("<f4").tobytes())
    write_json(f"{path}.json", {"dtype": "f32le", "shape": list(array.shape)})


def read_image(path) -> np.ndarray:
    path = Path(path)
    sidecar = Path(f"{path}.json")
    if not sidecar.exists():
        raise FormatError(f"missing sidecar {sidecar}")
    header = read_json(sidecar)
    if header.get("dtype") != "f32le":
        raise FormatError(f"{sidecar}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(n) for n in header["shape"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: expected {int(np.prod(shape))} float32 values for shape {shape}, found {data.size}")
    return data.reshape(shape).astype(np.float32)


def threads() -> int:
    """Worker cap from ``AAHEAD_THREADS`` (default: number of cores)."""
    raw = os.environ.get("AAHEAD_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise FormatError(f"AAHEAD_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
