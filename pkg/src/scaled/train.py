"""Training objectives, the Adam training loop and checkpoint persistence."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
import tempfile
import time
import zlib
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import model
from .codec import CodecConfig, CodecError, round_trip_batch
from .rateproxy import RateProxyParams, calibrate, rate_estimate
from .resample import bicubic_upsample, format_scale, parse_scale
from .surrogate import FallbackCounter, SurrogateConfig, apply, ste_apply
from .tensor import AdamState, Tensor, adam_step, add, backward, mse, mul

logger = logging.getLogger(__name__)

STRATEGIES = ("d-only", "ste", "scaled-d", "scaled-rd")
CODEC_STRATEGIES = ("ste", "scaled-d", "scaled-rd")

MAGIC = b"SCLD"
FORMAT_VERSION = 1

LOG_COLUMNS = ("step", "loss", "distortion", "rate_term", "y_l1", "fallback", "wall_time")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "scaled-d"
    scale: str = "1/2"
    qp: Optional[int] = None
    qstep: Optional[float] = None
    lam: float = 0.0
    epochs: int = 100
    steps: Optional[int] = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    seed: int = 0
    hidden_channels: int = model.DEFAULT_HIDDEN
    slope: float = model.DEFAULT_SLOPE
    sigma_scope: str = "per-sample"
    sigma_floor: float = 1e-6
    tau: float = 0.02
    eval_every: int = 0
    codec: Optional[CodecConfig] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if isinstance(self.scale, Fraction):
            self.scale = format_scale(self.scale)
        parse_scale(self.scale)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lam > 0 and self.strategy != "scaled-rd":
            raise ValueError("lambda only applies to the scaled-rd strategy")
        if isinstance(self.codec, dict):
            self.codec = CodecConfig(**self.codec)

    @property
    def scale_ratio(self) -> Fraction:
        return parse_scale(self.scale)

    @property
    def needs_codec(self) -> bool:
        return self.strategy in CODEC_STRATEGIES

    def codec_config(self) -> Optional[CodecConfig]:
        if self.codec is None:
            return None
        d = dict(self.codec.__dict__)
        if self.qp is not None:
            d.update(qp=self.qp, qstep=None)
        if self.qstep is not None:
            d.update(qstep=self.qstep)
        return CodecConfig(**d)

    def surrogate_config(self) -> SurrogateConfig:
        mode = "ste" if self.strategy == "ste" else "scaled"
        return SurrogateConfig(mode, self.sigma_scope, self.sigma_floor)

    def to_dict(self) -> Dict:
        d = asdict(self)
        return d


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: Dict
    proxy: Optional[Dict] = None
    loss_history: List[float] = field(default_factory=list)
    eval_history: List[List[float]] = field(default_factory=list)
    seed: int = 0
    version: int = FORMAT_VERSION

    def tensors(self) -> Dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _record_stats(stats, **kw):
    if stats is not None:
        stats.update(kw)


def _upsample_to(x: Tensor, ref: Tensor) -> Tensor:
    return bicubic_upsample(x, ref.shape[2], ref.shape[3])


def loss_d_only(x: Tensor, params, s, slope: float = model.DEFAULT_SLOPE, stats: Optional[dict] = None) -> Tensor:
    """Codec-agnostic end-to-end MSE through downsampler and bicubic upsampler."""
    y = model.forward(x, params, s, slope)
    loss = mse(x, _upsample_to(y, x))
    _record_stats(stats, y=y, distortion=float(loss.data), rate_term=0.0, fallback=0)
    return loss


def _coded(y: Tensor, codec_cfg: CodecConfig):
    if codec_cfg is None:
        raise CodecError("this strategy needs a codec but none is configured")
    recon, bits, _ = round_trip_batch(y.data, codec_cfg)
    return recon, bits


def loss_ste(x: Tensor, params, s, codec_cfg: CodecConfig, slope: float = model.DEFAULT_SLOPE,
             stats: Optional[dict] = None) -> Tensor:
    y = model.forward(x, params, s, slope)
    recon, bits = _coded(y, codec_cfg)
    y_hat = ste_apply(y, recon)
    loss = mse(x, _upsample_to(y_hat, x))
    _record_stats(stats, y=y, recon=recon, bits=bits, distortion=float(loss.data), rate_term=0.0, fallback=0)
    return loss


def loss_scaled_d(x: Tensor, params, s, codec_cfg: CodecConfig, surrogate_cfg: SurrogateConfig = SurrogateConfig(),
                  slope: float = model.DEFAULT_SLOPE, stats: Optional[dict] = None) -> Tensor:
    y = model.forward(x, params, s, slope)
    recon, bits = _coded(y, codec_cfg)
    counter = FallbackCounter()
    y_hat = apply(y, recon, surrogate_cfg, counter)
    loss = mse(x, _upsample_to(y_hat, x))
    _record_stats(stats, y=y, recon=recon, bits=bits, distortion=float(loss.data), rate_term=0.0,
                  fallback=counter.count)
    return loss


def loss_scaled_rd(x: Tensor, params, s, codec_cfg: CodecConfig, surrogate_cfg: SurrogateConfig,
                   proxy: RateProxyParams, lam: float, slope: float = model.DEFAULT_SLOPE,
                   stats: Optional[dict] = None) -> Tensor:
    """SCALED distortion plus lam * estimated bits per source pixel of the downsampled signal."""
    if proxy is None or not proxy.calibrated:
        raise ValueError("scaled-rd needs a calibrated rate proxy")
    inner: dict = {}
    distortion = loss_scaled_d(x, params, s, codec_cfg, surrogate_cfg, slope, inner)
    y = inner["y"]
    pixels = x.shape[0] * x.shape[2] * x.shape[3]
    rate = mul(rate_estimate(y, proxy), y.dtype.type(1.0 / pixels))
    loss = add(distortion, mul(rate, y.dtype.type(lam)))
    inner.update(distortion=float(distortion.data), rate_term=float(rate.data))
    _record_stats(stats, **inner)
    return loss


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def frozen(params) -> Dict[str, Tensor]:
    return {k: Tensor(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}


def downsample(params, x: np.ndarray, s, slope: float = model.DEFAULT_SLOPE, chunk: int = 16) -> np.ndarray:
    """Off-tape forward pass in chunks."""
    p = frozen(params)
    outs = [model.forward(Tensor(x[i:i + chunk]), p, s, slope).data for i in range(0, len(x), chunk)]
    return np.concatenate(outs)


def post_codec_mse(params, x: np.ndarray, s, codec_cfg: Optional[CodecConfig],
                   slope: float = model.DEFAULT_SLOPE) -> float:
    """End-to-end MSE of upsample(codec(f(x))) against x; codec skipped when None."""
    y = downsample(params, x, s, slope)
    if codec_cfg is not None:
        y, _, _ = round_trip_batch(y, codec_cfg)
    xr = bicubic_upsample(Tensor(y), x.shape[2], x.shape[3]).data
    return float(np.mean((xr.astype(np.float64) - x) ** 2))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def calibrate_for(cfg: TrainConfig, data: np.ndarray, codec_cfg: CodecConfig, max_frames: int = 16):
    """Frozen per-task rate proxy fitted on bilinearly downsampled training patches."""
    from .resample import bilinear_downsample

    frames = bilinear_downsample(Tensor(data[:max_frames].astype(np.float64)), cfg.scale_ratio).data
    if codec_cfg.qp is not None:
        qps = sorted({min(max(codec_cfg.qp + d, 0), 51) for d in (-6, -3, 0, 3, 6)})
        cfgs = [codec_cfg.with_qp(q) for q in qps]
    else:
        q = codec_cfg.effective_qstep()
        cfgs = [CodecConfig(backend=codec_cfg.backend, qstep=q * f) for f in (0.5, 0.75, 1.0, 1.5, 2.0)]
    return calibrate(list(frames), cfgs, cfg.tau)


def _step_loss(cfg: TrainConfig, x: Tensor, params, codec_cfg, surrogate_cfg, proxy, stats):
    s = cfg.scale_ratio
    if cfg.strategy == "d-only":
        return loss_d_only(x, params, s, cfg.slope, stats)
    if cfg.strategy == "ste":
        return loss_ste(x, params, s, codec_cfg, cfg.slope, stats)
    if cfg.strategy == "scaled-d":
        return loss_scaled_d(x, params, s, codec_cfg, surrogate_cfg, cfg.slope, stats)
    return loss_scaled_rd(x, params, s, codec_cfg, surrogate_cfg, proxy, cfg.lam, cfg.slope, stats)


def total_steps(cfg: TrainConfig, n_items: int) -> int:
    if cfg.steps is not None:
        return int(cfg.steps)
    return cfg.epochs * math.ceil(n_items / cfg.batch_size)


def _batches(n: int, batch: int, seed: int):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch):
            yield order[i:i + batch]


def train_model(cfg: TrainConfig, dataset: np.ndarray, holdout: Optional[np.ndarray] = None,
                log_path: Optional[os.PathLike] = None, proxy: Optional[RateProxyParams] = None,
                callback=None) -> Checkpoint:
    """Train one downsampler for one (strategy, scale, quantizer) cell.

    ``dataset`` and ``holdout`` are (P, 3, H, W) arrays in [0, 1]. The held-out set
    (if given) is evaluated post-codec every ``cfg.eval_every`` steps and at both ends.
    """
    data = np.asarray(dataset, dtype=np.float32)
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    codec_cfg = cfg.codec_config()
    if cfg.needs_codec and codec_cfg is None:
        raise CodecError(f"strategy {cfg.strategy!r} needs a codec but none is configured")
    surrogate_cfg = cfg.surrogate_config()
    if cfg.strategy == "scaled-rd" and proxy is None:
        proxy = calibrate_for(cfg, data, codec_cfg).params
    params = model.init_params(cfg.seed, cfg.hidden_channels)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    n_steps = total_steps(cfg, len(data))
    losses: List[float] = []
    evals: List[List[float]] = []

    def evaluate(step):
        if holdout is not None:
            evals.append([step, post_codec_mse(params, holdout, cfg.scale_ratio, codec_cfg, cfg.slope)])

    log = None
    writer = None
    if log_path is not None:
        new = not Path(log_path).exists()
        log = open(log_path, "a", newline="")
        writer = csv.writer(log)
        if new:
            writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    try:
        evaluate(0)
        batches = _batches(len(data), cfg.batch_size, cfg.seed)
        for step in range(1, n_steps + 1):
            x = Tensor(data[next(batches)])
            stats: dict = {}
            try:
                loss = _step_loss(cfg, x, params, codec_cfg, surrogate_cfg, proxy, stats)
            except CodecError as exc:
                raise TrainingError(f"codec failure: {exc}", step) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                y_l1 = float(np.mean(np.abs(stats["y"].data))) if "y" in stats else float("nan")
                raise TrainingError(f"non-finite loss {value} (mean |y| = {y_l1:.4g})", step)
            for p in params.values():
                p.grad = None
            backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient in {k}", step)
            adam_step(params, grads, state)
            losses.append(value)
            y_l1 = float(np.mean(np.abs(stats["y"].data)))
            if writer is not None:
                writer.writerow([step, repr(value), repr(stats.get("distortion", value)),
                                 repr(stats.get("rate_term", 0.0)), repr(y_l1), stats.get("fallback", 0),
                                 f"{time.perf_counter() - t0:.3f}"])
            if callback is not None:
                callback(step, value, stats, y_l1)
            if cfg.eval_every and step % cfg.eval_every == 0 and step != n_steps:
                evaluate(step)
        evaluate(n_steps)
    finally:
        if log is not None:
            log.close()
    return Checkpoint(
        params={k: v.data.copy() for k, v in params.items()},
        config=cfg.to_dict(),
        proxy=None if proxy is None else proxy.to_dict(),
        loss_history=losses,
        eval_history=evals,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", ck.version, len(ck.params))]
    for name in sorted(ck.params):
        arr = np.ascontiguousarray(ck.params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}i", *arr.shape))
        parts.append(arr.tobytes())
    blob = json.dumps({"config": ck.config, "proxy": ck.proxy, "loss_history": ck.loss_history,
                       "eval_history": ck.eval_history, "seed": ck.seed},
                      sort_keys=True, indent=1).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ck: Checkpoint, path: os.PathLike) -> Path:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(checkpoint_bytes(ck))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: unexpected end of data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version = r.u32()
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}")
    if len(buf) < 12:
        raise CheckpointError("corrupt checkpoint: unexpected end of data")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError("corrupt checkpoint: checksum mismatch (truncated or damaged file)")
    r = _Reader(body)
    r.take(8)
    count = r.u32()
    params = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}i", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(body):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return Checkpoint(params, meta["config"], meta["proxy"], meta["loss_history"], meta["eval_history"],
                      meta["seed"], version)


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def cell_name(cfg: TrainConfig) -> str:
    scale = cfg.scale.replace("/", "-")
    quant = f"qp{cfg.qp}" if cfg.qp is not None else (f"q{cfg.qstep:g}" if cfg.qstep is not None else "nocodec")
    name = f"{cfg.strategy}_s{scale}_{quant}"
    if cfg.strategy == "scaled-rd":
        name += f"_lam{cfg.lam:g}"
    return name
