"""Raw YUV / Y4M I/O, chroma layout conversion and training patch extraction."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .frame import FramePlanar, chroma_dims
from .resample import resize_plane

Y4M_MAGIC = b"YUV4MPEG2"
_Y4M_LAYOUTS = {"420": "420", "420jpeg": "420", "420paldv": "420", "420mpeg2": "420", "444": "444"}


class MediaError(ValueError):
    pass


@dataclass
class SequenceSource:
    path: Union[str, Path]
    width: Optional[int] = None
    height: Optional[int] = None
    frame_count: Optional[int] = None
    layout: str = "420"
    fps: Tuple[int, int] = (30, 1)

    @property
    def is_y4m(self) -> bool:
        return str(self.path).lower().endswith(".y4m")


def frame_bytes(width: int, height: int, layout: str) -> int:
    ch, cw = chroma_dims(height, width, layout)
    return width * height + 2 * ch * cw


def parse_y4m_header(line: bytes) -> dict:
    tokens = line.strip().split(b" ")
    if not tokens or tokens[0] != Y4M_MAGIC:
        raise MediaError("malformed Y4M header: missing YUV4MPEG2 signature")
    info = {"layout": "420", "fps": (30, 1)}
    for tok in tokens[1:]:
        if not tok:
            continue
        key, val = chr(tok[0]), tok[1:].decode("ascii", "replace")
        try:
            if key == "W":
                info["width"] = int(val)
            elif key == "H":
                info["height"] = int(val)
            elif key == "F":
                num, den = val.split(":")
                info["fps"] = (int(num), int(den))
            elif key == "C":
                if val not in _Y4M_LAYOUTS:
                    raise MediaError(f"unsupported Y4M chroma layout C{val}")
                info["layout"] = _Y4M_LAYOUTS[val]
        except MediaError:
            raise
        except ValueError as exc:
            raise MediaError(f"malformed Y4M header token {tok!r}") from exc
    if "width" not in info or "height" not in info:
        raise MediaError("malformed Y4M header: missing W or H")
    return info


def probe(src: SequenceSource) -> SequenceSource:
    """Fill in dimensions and frame count from the file (Y4M header or raw size)."""
    path = Path(src.path)
    if not path.exists():
        raise FileNotFoundError(f"no such sequence file: {path}")
    size = path.stat().st_size
    if src.is_y4m:
        with open(path, "rb") as fh:
            header = fh.readline()
        info = parse_y4m_header(header)
        fb = frame_bytes(info["width"], info["height"], info["layout"])
        count = (size - len(header)) // (len(b"FRAME\n") + fb)
        return SequenceSource(path, info["width"], info["height"], count, info["layout"], info["fps"])
    if src.width is None or src.height is None:
        raise MediaError(f"raw stream {path} needs explicit width and height")
    if src.layout not in _Y4M_LAYOUTS.values():
        raise MediaError(f"unsupported chroma layout {src.layout!r}")
    fb = frame_bytes(src.width, src.height, src.layout)
    if size % fb:
        raise MediaError(f"truncated raw stream {path}: {size} bytes is not a multiple of the {fb}-byte frame")
    return SequenceSource(path, src.width, src.height, size // fb, src.layout, src.fps)


def _planes_from_bytes(buf: bytes, width: int, height: int, layout: str) -> FramePlanar:
    ch, cw = chroma_dims(height, width, layout)
    arr = np.frombuffer(buf, dtype=np.uint8).astype(np.float64) / 255.0
    n = width * height
    m = ch * cw
    return FramePlanar(arr[:n].reshape(height, width), arr[n:n + m].reshape(ch, cw),
                       arr[n + m:n + 2 * m].reshape(ch, cw), layout)


def read_frames(src: SequenceSource, start: int = 0, count: Optional[int] = None) -> List[FramePlanar]:
    src = probe(src)
    fb = frame_bytes(src.width, src.height, src.layout)
    stop = src.frame_count if count is None else min(src.frame_count, start + count)
    frames = []
    with open(src.path, "rb") as fh:
        if src.is_y4m:
            fh.readline()
        for _ in range(start):
            if src.is_y4m:
                fh.readline()
            fh.seek(fb, os.SEEK_CUR)
        for i in range(start, stop):
            if src.is_y4m:
                marker = fh.readline()
                if not marker.startswith(b"FRAME"):
                    raise MediaError(f"malformed Y4M frame marker at frame {i}")
            buf = fh.read(fb)
            if len(buf) != fb:
                raise MediaError(f"truncated file {src.path} at frame {i}")
            frames.append(_planes_from_bytes(buf, src.width, src.height, src.layout))
        if src.is_y4m and count is None and fh.read(1):
            raise MediaError(f"truncated file {src.path}: trailing partial frame")
    return frames


def to_bytes(plane: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and quantize to 8 bits, rounding halves away from zero."""
    scaled = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def frame_to_bytes(frame: FramePlanar) -> bytes:
    return b"".join(to_bytes(p).tobytes() for p in frame.planes)


def write_frames(frames: Sequence[FramePlanar], dst: Union[str, Path], layout: Optional[str] = None,
                 fps: Tuple[int, int] = (30, 1)) -> Path:
    """Write raw planar YUV, or Y4M when ``dst`` ends in ``.y4m``."""
    if not frames:
        raise MediaError("no frames to write")
    layout = layout or frames[0].chroma_layout
    frames = [convert_layout(f, layout) for f in frames]
    h, w = frames[0].height, frames[0].width
    for f in frames:
        if (f.height, f.width) != (h, w):
            raise MediaError("frames have inconsistent dimensions")
    dst = Path(dst)
    with open(dst, "wb") as fh:
        y4m = dst.suffix.lower() == ".y4m"
        if y4m:
            fh.write(b"YUV4MPEG2 W%d H%d F%d:%d Ip A1:1 C%s\n" % (w, h, fps[0], fps[1], layout.encode()))
        for f in frames:
            if y4m:
                fh.write(b"FRAME\n")
            fh.write(frame_to_bytes(f))
    return dst


def to_420(frame: FramePlanar) -> FramePlanar:
    """Halve chroma with the bilinear kernel (2x2 average at this ratio)."""
    if frame.chroma_layout == "420":
        return frame
    ch, cw = chroma_dims(frame.height, frame.width, "420")
    return FramePlanar(frame.y, resize_plane(frame.u, ch, cw, "bilinear"),
                       resize_plane(frame.v, ch, cw, "bilinear"), "420")


def to_444(frame: FramePlanar) -> FramePlanar:
    """Double chroma with the bicubic kernel."""
    if frame.chroma_layout == "444":
        return frame
    h, w = frame.height, frame.width
    return FramePlanar(frame.y, resize_plane(frame.u, h, w, "bicubic"),
                       resize_plane(frame.v, h, w, "bicubic"), "444")


def convert_layout(frame: FramePlanar, layout: str) -> FramePlanar:
    return to_420(frame) if layout == "420" else to_444(frame)


def simulate_chroma_degradation(frame: FramePlanar) -> FramePlanar:
    if frame.chroma_layout != "444":
        raise MediaError("chroma degradation expects a 444 frame")
    if frame.height % 2 or frame.width % 2:
        raise MediaError(f"chroma degradation needs even dimensions, got {frame.width}x{frame.height}")
    return to_444(to_420(frame))


def extract_patches(frames: Sequence[FramePlanar], patch: int, stride: int, seed: int = 0) -> np.ndarray:
    """Grid patches from every frame as a shuffled (P, 3, patch, patch) float32 array."""
    out = []
    for f in frames:
        f = to_444(f)
        if patch > f.height or patch > f.width:
            raise MediaError(f"patch {patch} larger than frame {f.width}x{f.height}")
        arr = f.to_array(np.float32)
        for top in range(0, f.height - patch + 1, stride):
            for left in range(0, f.width - patch + 1, stride):
                out.append(arr[:, top:top + patch, left:left + patch])
    if not out:
        return np.zeros((0, 3, patch, patch), dtype=np.float32)
    stack = np.stack(out)
    order = np.random.Generator(np.random.Philox(seed)).permutation(len(stack))
    return np.ascontiguousarray(stack[order])
