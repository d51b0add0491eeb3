"""Raw-array and JSON file helpers shared across modules.

Volumes are stored as raw little-endian float32, masks as raw uint8, both in
C order (z fastest). Array dimensions live in the owning manifest, not in the
files themselves. All JSON written here is key-sorted so that reruns with the
same inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def write_raw_f32(path: Path | str, data: np.ndarray) -> None:
    np.ascontiguousarray(data, dtype="<f4").tofile(path)


def read_raw_f32(path: Path | str, shape: tuple[int, ...]) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} float32 values, found {data.size}")
    return data.reshape(shape)


def write_raw_u8(path: Path | str, data: np.ndarray) -> None:
    np.ascontiguousarray(data, dtype=np.uint8).tofile(path)


def read_raw_u8(path: Path | str, shape: tuple[int, ...]) -> np.ndarray:
    data = np.fromfile(path, dtype=np.uint8)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} uint8 values, found {data.size}")
    return data.reshape(shape)


def dumps_canonical(obj) -> str:
    """Deterministic JSON text (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=2)


def write_json(path: Path | str, obj) -> None:
    Path(path).write_text(dumps_canonical(obj) + "\n", encoding="utf-8")


def read_json(path: Path | str):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
