"""Axis-aligned voxel bounding boxes (half-open intervals per axis)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AXIS_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class BBox:
    """Half-open voxel box: voxel v belongs to the box iff start <= v < stop per axis."""

    start: tuple[int, int, int]
    stop: tuple[int, int, int]

    def __post_init__(self):
        start = tuple(int(v) for v in self.start)
        stop = tuple(int(v) for v in self.stop)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "stop", stop)
        if len(start) != 3 or len(stop) != 3:
            raise ValueError("BBox requires 3 axes")
        if any(b <= a for a, b in zip(start, stop)):
            raise ValueError(f"BBox sides must be positive: start={start}, stop={stop}")

    @property
    def sides(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.start, self.stop))

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2 for a, b in zip(self.start, self.stop))

    @property
    def volume(self) -> int:
        return int(np.prod(self.sides))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))

    def contains_box(self, other: "BBox") -> bool:
        return all(a <= oa and ob <= b for a, oa, ob, b in zip(self.start, other.start, other.stop, self.stop))

    def inside(self, shape: tuple[int, int, int]) -> bool:
        return all(a >= 0 and b <= s for a, b, s in zip(self.start, self.stop, shape))

    def shift(self, offset: tuple[int, int, int]) -> "BBox":
        return BBox(
            tuple(a + o for a, o in zip(self.start, offset)),
            tuple(b + o for b, o in zip(self.stop, offset)),
        )

    def clip(self, shape: tuple[int, int, int]) -> "BBox":
        """Intersect with the volume [0, shape); raises if the intersection is empty."""
        start = tuple(max(0, min(a, s)) for a, s in zip(self.start, shape))
        stop = tuple(max(0, min(b, s)) for b, s in zip(self.stop, shape))
        if any(b <= a for a, b in zip(start, stop)):
            raise ValueError(f"bbox {self.start}..{self.stop} lies outside volume of shape {shape}")
        return BBox(start, stop)

    def to_dict(self) -> dict:
        return {"start": list(self.start), "stop": list(self.stop)}

    @classmethod
    def from_dict(cls, d: dict) -> "BBox":
        return cls(tuple(d["start"]), tuple(d["stop"]))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BBox":
        """Tight box around the nonzero voxels of a 3D mask."""
        if mask.ndim != 3:
            raise ValueError("mask must be 3D")
        nz = np.nonzero(mask)
        if nz[0].size == 0:
            raise ValueError("no tumor voxels")
        return cls(
            tuple(int(idx.min()) for idx in nz),
            tuple(int(idx.max()) + 1 for idx in nz),
        )
