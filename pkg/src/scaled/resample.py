"""Resampling kernels as dense 1-D operator matrices.

All filters use the align-corners=false convention: output pixel ``i`` samples
input coordinate ``(i + 0.5) * in/out - 0.5``. Bilinear and bicubic are
applied on the tape as separable linear maps, so their backward is the
transpose. Lanczos is numpy-only and serves the baseline path.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache
from typing import Tuple, Union

import numpy as np

from .frame import FramePlanar
from .tensor import Tensor, separable

ScaleRatio = Fraction

EVAL_SCALES = tuple(Fraction(s) for s in ("2/3", "1/2", "2/5", "1/3", "1/4", "1/5"))

BICUBIC_A = -0.5
LANCZOS_LOBES = 3


def parse_scale(value: Union[str, int, float, Fraction]) -> Fraction:
    s = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1000)
    if s <= 0:
        raise ValueError(f"scale ratio must be positive, got {value}")
    return s


def format_scale(s: Fraction) -> str:
    return f"{s.numerator}/{s.denominator}"


def even_floor(n: int, s: Fraction) -> int:
    return (int(n * s) // 2) * 2


def target_dims(h: int, w: int, s: Fraction) -> Tuple[int, int]:
    """Even-floored output size for scale ``s``; raises if either side drops below 2."""
    s = parse_scale(s)
    th, tw = even_floor(h, s), even_floor(w, s)
    if th < 2 or tw < 2:
        raise ValueError(f"scale {format_scale(s)} maps {w}x{h} to {tw}x{th}, below the 2-pixel minimum")
    return th, tw


def cubic_weight(t: float, a: float = BICUBIC_A) -> float:
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def lanczos_weight(t: float, lobes: int = LANCZOS_LOBES) -> float:
    if t == 0:
        return 1.0
    if abs(t) >= lobes:
        return 0.0
    pt = math.pi * t
    return lobes * math.sin(pt) * math.sin(pt / lobes) / (pt * pt)


@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def bicubic_matrix(n_in: int, n_out: int, a: float = BICUBIC_A) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        f = int(math.floor(src))
        t = src - f
        for k in range(-1, 3):
            j = min(max(f + k, 0), n_in - 1)
            m[i, j] += cubic_weight(t - k, a)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def lanczos_matrix(n_in: int, n_out: int, lobes: int = LANCZOS_LOBES) -> np.ndarray:
    """Lanczos taps widened by the downscale factor (anti-aliasing), rows normalized."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = lobes * stretch
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = int(math.floor(center - support))
        hi = int(math.ceil(center + support))
        for j in range(lo, hi + 1):
            w = lanczos_weight((j + 0.5 - center) / stretch, lobes)
            if w != 0.0:
                m[i, min(max(j, 0), n_in - 1)] += w
        m[i] /= m[i].sum()
    m.setflags(write=False)
    return m


def bilinear_downsample(x: Tensor, s) -> Tensor:
    s = parse_scale(s)
    if s > 1:
        raise ValueError("bilinear_downsample expects a scale <= 1")
    h, w = x.shape[-2:]
    th, tw = target_dims(h, w, s)
    return resize_tensor(x, th, tw, "bilinear")


def bicubic_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if target_h < h or target_w < w:
        raise ValueError(f"bicubic_upsample target {target_w}x{target_h} is smaller than source {w}x{h}")
    return resize_tensor(x, target_h, target_w, "bicubic")


_MATRICES = {"bilinear": bilinear_matrix, "bicubic": bicubic_matrix, "lanczos": lanczos_matrix}


def resize_tensor(x: Tensor, th: int, tw: int, kernel: str) -> Tensor:
    h, w = x.shape[-2:]
    make = _MATRICES[kernel]
    return separable(x, make(h, th), make(w, tw), op=kernel)


def resize_plane(plane: np.ndarray, th: int, tw: int, kernel: str) -> np.ndarray:
    """Numpy (off-tape) resize of a 2-D plane, float64."""
    h, w = plane.shape
    make = _MATRICES[kernel]
    return make(h, th) @ np.asarray(plane, dtype=np.float64) @ make(w, tw).T


def resize_frame(frame: FramePlanar, th: int, tw: int, kernel: str) -> FramePlanar:
    from .frame import chroma_dims

    ch, cw = chroma_dims(th, tw, frame.chroma_layout)
    return FramePlanar(
        resize_plane(frame.y, th, tw, kernel),
        resize_plane(frame.u, ch, cw, kernel),
        resize_plane(frame.v, ch, cw, kernel),
        frame.chroma_layout,
    )


def lanczos_resize(frame: FramePlanar, s) -> FramePlanar:
    th, tw = target_dims(frame.height, frame.width, parse_scale(s))
    return resize_frame(frame, th, tw, "lanczos")
