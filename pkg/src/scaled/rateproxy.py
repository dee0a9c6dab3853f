"""Differentiable rate estimate: soft count of nonzero blockwise DCT coefficients,
mapped to bits by an affine fit against a real codec."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, Sequence

import numpy as np
from scipy import stats

from .codec import BLOCK, CodecConfig, dct_matrix, encode_decode
from .frame import FramePlanar
from .tensor import Tensor, _record, add, mul, separable

DEFAULT_TAU = 0.02


@dataclass
class RateProxyParams:
    tau: float = DEFAULT_TAU
    a: float = 1.0
    b: float = 0.0
    block: int = BLOCK
    calibrated: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.a < 0:
            raise ValueError("slope a must be non-negative")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class CalibrationReport:
    params: RateProxyParams
    pearson: float
    spearman: float
    samples: int


def _edge_pad_matrix(n: int, block: int) -> np.ndarray:
    m = (-n) % block
    p = np.zeros((n + m, n))
    p[np.arange(n), np.arange(n)] = 1.0
    p[n:, n - 1] = 1.0
    return p


def block_dct2d(x: Tensor, block: int = BLOCK) -> Tensor:
    """Orthonormal per-block 2-D DCT-II of an NCHW tensor, coefficients laid out in place."""
    h, w = x.shape[-2:]
    if h % block or w % block:
        x = separable(x, _edge_pad_matrix(h, block), _edge_pad_matrix(w, block), op="edge_pad")
        h, w = x.shape[-2:]
    d = dct_matrix(block).astype(x.dtype)
    lead = x.shape[:-2]

    def to_blocks(a):
        return np.moveaxis(a.reshape(*lead, h // block, block, w // block, block), -3, -2)

    def from_blocks(a):
        return np.moveaxis(a, -2, -3).reshape(*lead, h, w)

    out = from_blocks(d @ to_blocks(x.data) @ d.T)
    return _record("block_dct2d", out, (x,), lambda g: (from_blocks(d.T @ to_blocks(g) @ d),))


def block_idct2d(c: np.ndarray, block: int = BLOCK) -> np.ndarray:
    h, w = c.shape[-2:]
    lead = c.shape[:-2]
    d = dct_matrix(block)
    blocks = np.moveaxis(c.reshape(*lead, h // block, block, w // block, block), -3, -2)
    return np.moveaxis(d.T @ blocks @ d, -2, -3).reshape(*lead, h, w)


def soft_l0(coeffs: Tensor, tau: float) -> Tensor:
    """Sum of c^2 / (c^2 + tau^2)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    c = coeffs.data
    t2 = c.dtype.type(tau * tau)
    c2 = c * c
    denom = c2 + t2
    out = np.asarray(np.sum(c2 / denom), dtype=c.dtype)
    return _record("soft_l0", out, (coeffs,), lambda g: (g * 2 * c * t2 / (denom * denom),))


def soft_l0_value(y: np.ndarray, tau: float, luma_only: bool = True) -> float:
    x = y[:, :1] if luma_only and y.ndim == 4 else y
    return float(soft_l0(block_dct2d(Tensor(np.asarray(x, dtype=np.float64))), tau).data)


def rate_estimate(y: Tensor, p: RateProxyParams, luma_only: bool = True) -> Tensor:
    """Estimated bits a * soft_l0(DCT(luma)) + b."""
    x = y
    if luma_only and y.ndim == 4 and y.shape[1] > 1:
        x = _record("luma", y.data[:, :1], (y,), lambda g: (_luma_grad(g, y.shape),))
    count = soft_l0(block_dct2d(x, p.block), p.tau)
    return add(mul(count, y.dtype.type(p.a)), y.dtype.type(p.b))


def _luma_grad(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=g.dtype)
    out[:, :1] = g
    return out


def fit_affine(counts: Sequence[float], bits: Sequence[float], tau: float) -> CalibrationReport:
    x = np.asarray(counts, dtype=np.float64)
    yv = np.asarray(bits, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("degenerate calibration: soft-l0 values do not vary")
    a, b = np.polyfit(x, yv, 1)
    pearson = float(stats.pearsonr(x, yv)[0]) if np.ptp(yv) > 0 else float("nan")
    spearman = float(stats.spearmanr(x, yv)[0]) if np.ptp(yv) > 0 else float("nan")
    return CalibrationReport(RateProxyParams(tau=tau, a=max(float(a), 0.0), b=float(b), calibrated=True),
                             pearson, spearman, int(x.size))


def calibration_samples(frames: Sequence[np.ndarray], cfgs: Sequence[CodecConfig], tau: float):
    """(soft_l0 of the coded luma, true bits) for every frame x codec setting.

    The soft count is taken on the reconstruction: its surviving coefficients are
    what the codec actually spent bits on.
    """
    counts, bits = [], []
    for cfg in cfgs:
        for arr in frames:
            res = encode_decode([FramePlanar.from_array(np.asarray(arr, dtype=np.float64))], cfg)
            rec = res.recon[0].to_array(np.float64)[None]
            counts.append(soft_l0_value(rec, tau))
            bits.append(res.bits)
    return counts, bits


def calibrate(frames: Sequence[np.ndarray], cfgs: Sequence[CodecConfig], tau: float = DEFAULT_TAU) -> CalibrationReport:
    """Least-squares fit of codec bits against the soft count.

    ``frames`` are 3xHxW arrays; ``cfgs`` must span at least 3 distinct quantizer settings.
    """
    if len(frames) < 8:
        raise ValueError(f"calibration needs at least 8 frames, got {len(frames)}")
    distinct = {(c.backend, c.qp, c.qstep) for c in cfgs}
    if len(distinct) < 3:
        raise ValueError("calibration needs at least 3 distinct QP/qstep settings (rank-deficient otherwise)")
    counts, bits = calibration_samples(frames, cfgs, tau)
    return fit_affine(counts, bits, tau)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    return float(stats.spearmanr(a, b)[0])
