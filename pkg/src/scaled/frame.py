from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYOUTS = ("444", "420")


@dataclass
class FramePlanar:
    """One video frame as three float planes in [0, 1]."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    chroma_layout: str = "444"

    def __post_init__(self):
        if self.chroma_layout not in LAYOUTS:
            raise ValueError(f"unsupported chroma layout {self.chroma_layout!r}")
        h, w = self.y.shape
        ch, cw = chroma_dims(h, w, self.chroma_layout)
        for name, plane in (("u", self.u), ("v", self.v)):
            if plane.shape != (ch, cw):
                raise ValueError(
                    f"{name} plane has shape {plane.shape}, expected {(ch, cw)} for {self.chroma_layout}")

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def planes(self):
        return (self.y, self.u, self.v)

    def to_array(self, dtype=np.float32) -> np.ndarray:
        """Stack a 444 frame into a 3xHxW array."""
        if self.chroma_layout != "444":
            raise ValueError("to_array needs a 444 frame")
        return np.stack(self.planes).astype(dtype, copy=False)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FramePlanar":
        return cls(arr[0], arr[1], arr[2], "444")


def chroma_dims(h: int, w: int, layout: str):
    if layout == "444":
        return h, w
    if h % 2 or w % 2:
        raise ValueError(f"4:2:0 needs even dimensions, got {w}x{h}")
    return h // 2, w // 2


def frames_to_batch(frames, dtype=np.float32) -> np.ndarray:
    return np.stack([f.to_array(dtype) for f in frames])


def batch_to_frames(batch: np.ndarray):
    return [FramePlanar.from_array(b) for b in batch]
