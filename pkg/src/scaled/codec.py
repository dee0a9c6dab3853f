"""Black-box encode/decode round trips.

Two backends share one contract: reconstructed frames plus an exact bit count.

* ``toy``: an in-process 8x8 DCT codec with uniform quantization and an exact
  code-length model (exp-Golomb run/level lengths). Pure and hermetic.
* ``external``: an H.264 encoder subprocess (x264 CLI or ffmpeg/libx264) in
  constant-QP mode, decoded back with an ffmpeg-compatible decoder.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .frame import FramePlanar, batch_to_frames, frames_to_batch
from .media import frame_bytes, frame_to_bytes, to_420, to_444, to_bytes, _planes_from_bytes
from .tensor import Tensor

logger = logging.getLogger(__name__)

BLOCK = 8
EVAL_QPS = tuple(range(17, 48, 3))
ENCODER_ENV = "SCALED_ENCODER"
DECODER_ENV = "SCALED_DECODER"


class CodecError(RuntimeError):
    pass


class CodecUnavailable(CodecError):
    pass


@dataclass
class CodecConfig:
    backend: str = "toy"
    qp: Optional[int] = None
    qstep: Optional[float] = None
    preset: str = "medium"
    encoder: str = "x264"
    decoder: str = "ffmpeg"
    extra_flags: List[str] = field(default_factory=list)
    keyint: Optional[int] = None
    threads: int = 1
    fps: int = 30
    tmp_dir: Optional[str] = None

    def __post_init__(self):
        if self.backend not in ("toy", "external"):
            raise ValueError(f"unknown codec backend {self.backend!r}")
        if self.qp is not None and not 0 <= int(self.qp) <= 51:
            raise ValueError(f"qp must lie in [0, 51], got {self.qp}")
        if self.qstep is not None and self.qstep <= 0:
            raise ValueError(f"qstep must be positive, got {self.qstep}")
        if self.backend == "external" and self.qp is None:
            raise ValueError("the external backend needs a qp")
        if self.backend == "toy" and self.qp is None and self.qstep is None:
            raise ValueError("the toy backend needs a qstep or a qp")

    def effective_qstep(self) -> float:
        return self.qstep if self.qstep is not None else qp_to_qstep(self.qp)

    def with_qp(self, qp: int) -> "CodecConfig":
        d = dict(self.__dict__)
        d.update(qp=qp, qstep=None)
        return CodecConfig(**d)


@dataclass
class CodecResult:
    recon: List[FramePlanar]
    bits: int
    meta: Dict[str, str] = field(default_factory=dict)


def qp_to_qstep(qp: int) -> float:
    """H.264-style step 2^((qp-4)/6) in 8-bit units, expressed in [0,1] signal units."""
    return 2.0 ** ((qp - 4) / 6.0) / 255.0


# ---------------------------------------------------------------------------
# toy DCT codec
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4)
def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k is the k-th basis vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=4)
def zigzag_order(n: int = BLOCK) -> np.ndarray:
    """Flat indices of an n x n block in JPEG zigzag order."""
    cells = sorted(((i, j) for i in range(n) for j in range(n)),
                   key=lambda ij: (ij[0] + ij[1], ij[1] if (ij[0] + ij[1]) % 2 == 0 else ij[0]))
    return np.array([i * n + j for i, j in cells])


def pad_to_block(plane: np.ndarray, block: int = BLOCK) -> np.ndarray:
    h, w = plane.shape[-2:]
    ph, pw = (-h) % block, (-w) % block
    if not (ph or pw):
        return plane
    pad = [(0, 0)] * (plane.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(plane, pad, mode="edge")


def blockwise(plane: np.ndarray, fn, block: int = BLOCK) -> np.ndarray:
    """Apply ``fn`` to a (..., Hb, Wb, block, block) view of a padded plane."""
    h, w = plane.shape[-2:]
    lead = plane.shape[:-2]
    blocks = plane.reshape(*lead, h // block, block, w // block, block)
    blocks = np.moveaxis(blocks, -3, -2)
    out = fn(blocks)
    return np.moveaxis(out, -2, -3).reshape(*lead, h, w)


def forward_dct_blocks(blocks: np.ndarray) -> np.ndarray:
    d = dct_matrix(blocks.shape[-1])
    return d @ blocks @ d.T


def inverse_dct_blocks(blocks: np.ndarray) -> np.ndarray:
    d = dct_matrix(blocks.shape[-1])
    return d.T @ blocks @ d


def ue_length(k: np.ndarray) -> np.ndarray:
    """Unsigned exp-Golomb code lengths: 2*bitlen(k+1) - 1."""
    _, exp = np.frexp(np.asarray(k, dtype=np.float64) + 1.0)
    return 2 * exp.astype(np.int64) - 1


def se_length(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    mapped = np.where(v > 0, 2 * v - 1, -2 * v)
    return ue_length(mapped)


def block_bits(levels: np.ndarray) -> int:
    """Exact code length of quantized 8x8 blocks given as (nblocks, 64) zigzag-ordered levels.

    Per block: se(DC) + ue(#nonzero AC) + sum over nonzero AC of ue(zero run) + se(level).
    """
    dc = levels[:, 0]
    ac = levels[:, 1:]
    nz_b, nz_p = np.nonzero(ac)
    total = int(se_length(dc).sum())
    total += int(ue_length(np.count_nonzero(ac, axis=1)).sum())
    if nz_b.size:
        prev = np.empty_like(nz_p)
        prev[0] = -1
        prev[1:] = np.where(nz_b[1:] == nz_b[:-1], nz_p[:-1], -1)
        runs = nz_p - prev - 1
        total += int(ue_length(runs).sum()) + int(se_length(ac[nz_b, nz_p]).sum())
    return total


def toy_code_plane(plane: np.ndarray, qstep: float) -> Tuple[np.ndarray, int, np.ndarray]:
    """Code one plane; returns (reconstruction, bits, quantized levels as (nblocks, 64) zigzag)."""
    h, w = plane.shape
    src = to_bytes(plane).astype(np.float64) / 255.0
    padded = pad_to_block(src)
    coeffs = blockwise(padded, forward_dct_blocks)
    levels_grid = np.round(coeffs / qstep)
    recon = blockwise(levels_grid * qstep, inverse_dct_blocks)[:h, :w]
    recon = to_bytes(recon).astype(np.float64) / 255.0
    ph, pw = padded.shape
    flat = levels_grid.reshape(ph // BLOCK, BLOCK, pw // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    flat = flat.reshape(-1, BLOCK * BLOCK)[:, zigzag_order()].astype(np.int64)
    return recon, block_bits(flat), flat


def toy_encode_decode(frames: Sequence[FramePlanar], qstep: float) -> CodecResult:
    if qstep <= 0:
        raise ValueError(f"qstep must be positive, got {qstep}")
    recon, bits = [], 0
    for f in frames:
        planes = []
        for p in f.planes:
            r, b, _ = toy_code_plane(p, qstep)
            planes.append(r)
            bits += b
        recon.append(FramePlanar(*planes, f.chroma_layout))
    return CodecResult(recon, bits, {"backend": "toy", "qstep": repr(float(qstep))})


# ---------------------------------------------------------------------------
# external H.264 backend
# ---------------------------------------------------------------------------


def resolve_executable(name: str, env_var: str) -> str:
    """Locate an executable: explicit path, then env override, then PATH.

    The ffmpeg bundled with the ``imageio-ffmpeg`` package is accepted as a last
    resort when ``name`` is ``ffmpeg``.
    """
    candidates = []
    if name and os.path.sep in name:
        candidates.append(name)
    env = os.environ.get(env_var)
    if env:
        candidates.append(env)
    if name:
        candidates.append(name)
    for c in candidates:
        found = shutil.which(c)
        if found:
            return found
    if name == "ffmpeg":
        try:
            import imageio_ffmpeg

            return imageio_ffmpeg.get_ffmpeg_exe()
        except Exception:
            pass
    raise CodecUnavailable(
        f"executable {name!r} not found; install it, put its path in the codec config, or set {env_var}")


def _is_ffmpeg(exe: str) -> bool:
    return "ffmpeg" in Path(exe).name.lower()


@lru_cache(maxsize=16)
def encoder_version(exe: str) -> str:
    flag = "-version" if _is_ffmpeg(exe) else "--version"
    try:
        out = subprocess.run([exe, flag], capture_output=True, timeout=30).stdout
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    lines = out.decode("utf-8", "replace").strip().splitlines()
    return lines[0] if lines else "unknown"


def encoder_command(exe: str, cfg: CodecConfig, width: int, height: int, out_path: str) -> List[str]:
    keyint = [] if cfg.keyint is None else [str(cfg.keyint)]
    if _is_ffmpeg(exe):
        cmd = [exe, "-hide_banner", "-loglevel", "error", "-y", "-f", "rawvideo", "-pix_fmt", "yuv420p",
               "-s", f"{width}x{height}", "-r", str(cfg.fps), "-i", "-", "-c:v", "libx264",
               "-preset", cfg.preset, "-qp", str(cfg.qp), "-threads", str(cfg.threads)]
        if keyint:
            cmd += ["-g", keyint[0]]
        return cmd + list(cfg.extra_flags) + ["-f", "h264", out_path]
    cmd = [exe, "--quiet", "--preset", cfg.preset, "--qp", str(cfg.qp), "--threads", str(cfg.threads),
           "--demuxer", "raw", "--input-csp", "i420", "--input-res", f"{width}x{height}",
           "--fps", str(cfg.fps)]
    if keyint:
        cmd += ["--keyint", keyint[0]]
    return cmd + list(cfg.extra_flags) + ["-o", out_path, "-"]


def decoder_command(exe: str, stream_path: str) -> List[str]:
    return [exe, "-hide_banner", "-loglevel", "error", "-i", stream_path,
            "-f", "rawvideo", "-pix_fmt", "yuv420p", "-"]


def external_encode_decode(frames: Sequence[FramePlanar], cfg: CodecConfig) -> CodecResult:
    enc = resolve_executable(cfg.encoder, ENCODER_ENV)
    dec = resolve_executable(cfg.decoder, DECODER_ENV)
    h, w = frames[0].height, frames[0].width
    raw = b"".join(frame_to_bytes(to_420(f)) for f in frames)
    with tempfile.TemporaryDirectory(prefix="scaled-codec-", dir=cfg.tmp_dir) as tmp:
        stream = os.path.join(tmp, "out.264")
        cmd = encoder_command(enc, cfg, w, h, stream)
        proc = subprocess.run(cmd, input=raw, capture_output=True)
        if proc.returncode != 0:
            raise CodecError(f"encoder exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
        size = os.path.getsize(stream)
        proc = subprocess.run(decoder_command(dec, stream), capture_output=True)
        if proc.returncode != 0:
            raise CodecError(f"decoder exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
    fb = frame_bytes(w, h, "420")
    if len(proc.stdout) != fb * len(frames):
        raise CodecError(f"decoded {len(proc.stdout)} bytes, expected {fb * len(frames)} for {len(frames)} frames")
    recon = []
    for i, f in enumerate(frames):
        r = _planes_from_bytes(proc.stdout[i * fb:(i + 1) * fb], w, h, "420")
        recon.append(to_444(r) if f.chroma_layout == "444" else r)
    meta = {"backend": "external", "encoder": enc, "encoder_version": encoder_version(enc),
            "preset": cfg.preset, "qp": str(cfg.qp)}
    return CodecResult(recon, 8 * size, meta)


def encode_decode(frames: Sequence[FramePlanar], cfg: CodecConfig) -> CodecResult:
    if not frames:
        raise ValueError("encode_decode needs at least one frame")
    h, w = frames[0].height, frames[0].width
    for f in frames:
        if (f.height, f.width, f.chroma_layout) != (h, w, frames[0].chroma_layout):
            raise ValueError("all frames must share dimensions and chroma layout")
    if cfg.backend == "toy":
        return toy_encode_decode(frames, cfg.effective_qstep())
    if h % 2 or w % 2:
        raise ValueError(f"H.264 4:2:0 coding needs even dimensions, got {w}x{h}")
    return external_encode_decode(frames, cfg)


def round_trip_batch(batch: np.ndarray, cfg: CodecConfig) -> Tuple[np.ndarray, List[int], Dict[str, str]]:
    """Code every item of an (N, 3, h, w) batch as its own single-frame (intra) sequence.

    Returns the reconstruction in the batch dtype, per-item bits and backend metadata.
    """
    recon, bits, meta = [], [], {}
    for frame in batch_to_frames(batch.astype(np.float64)):
        res = encode_decode([frame], cfg)
        recon.append(res.recon[0])
        bits.append(res.bits)
        meta = res.meta
    return frames_to_batch(recon, batch.dtype), bits, meta


def compression_error(y: Tensor, recon) -> Tensor:
    """Constant (off-tape) tensor holding recon - y."""
    if isinstance(recon, CodecResult):
        recon = frames_to_batch([to_444(f) for f in recon.recon], y.dtype)
    recon = np.asarray(recon, dtype=y.dtype)
    if recon.shape != y.shape:
        raise ValueError(f"reconstruction shape {recon.shape} does not match signal shape {y.shape}")
    return Tensor(recon - y.data)
