"""Gradients through a non-differentiable codec.

Both estimators produce the exact codec reconstruction in the forward pass.
``ste`` passes the cotangent straight through. ``scaled`` rescales the detached
compression error by sigma(eps)/sg(sigma(eps)), whose forward value is one, so
that the backward picks up the derivative of the error's standard deviation:

    J = I - eps (eps - mean(eps))^T / (N sigma^2)

per scope group of N elements. The graph is written as

    recon + (y - sg(y)) + sg(eps) * (rho - sg(rho)),   rho = sigma(eps) / sg(sigma(eps))

which has the same Jacobian as y + sg(eps) * rho but whose forward value is
``recon`` to the last bit (both bracketed differences are exactly zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .codec import CodecResult
from .frame import frames_to_batch
from .media import to_444
from .tensor import Tensor, add, div, mul, std_dev, stop_gradient, sub

SCOPES = {"per-sample": (1, 2, 3), "per-channel": (2, 3)}


@dataclass
class SurrogateConfig:
    mode: str = "scaled"
    sigma_scope: str = "per-sample"
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("ste", "scaled"):
            raise ValueError(f"unknown surrogate mode {self.mode!r}")
        if self.sigma_scope not in SCOPES:
            raise ValueError(f"unknown sigma scope {self.sigma_scope!r}")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")


@dataclass
class FallbackCounter:
    """Counts scope groups that fell back to STE because sigma(eps) was below the floor."""

    count: int = 0
    history: list = field(default_factory=list)

    def add(self, n: int) -> None:
        self.count += n
        self.history.append(n)


def _check(y: Tensor, recon) -> np.ndarray:
    if isinstance(recon, CodecResult):
        recon = frames_to_batch([to_444(f) for f in recon.recon], y.dtype)
    recon = np.asarray(recon, dtype=y.dtype)
    if recon.shape != y.shape:
        raise ValueError(f"reconstruction shape {recon.shape} does not match signal shape {y.shape}")
    return recon


def _group_axes(y: Tensor, scope: str) -> Tuple[int, ...]:
    axes = SCOPES[scope]
    if y.ndim != 4:
        axes = tuple(range(y.ndim))
    n = int(np.prod([y.shape[a] for a in axes]))
    if n < 2:
        raise ValueError(f"scope group of size {n}; need at least 2 elements")
    return axes


def ste_apply(y: Tensor, recon) -> Tensor:
    """recon in the forward pass, identity Jacobian in the backward pass."""
    recon = _check(y, recon)
    return add(Tensor(recon), sub(y, stop_gradient(y)))


def _scaled(y: Tensor, recon: np.ndarray, axes, floor: float):
    eps = sub(Tensor(recon), y)
    sigma = std_dev(eps, axis=axes) if axes is not None else std_dev(eps)
    valid = sigma.data >= floor
    # degenerate groups: numerator gated to zero, denominator forced to one
    gate = Tensor(valid.astype(y.dtype))
    denom = Tensor(np.where(valid, sigma.data, 1).astype(y.dtype))
    rho = div(mul(sigma, gate), denom)
    delta = sub(rho, stop_gradient(rho))
    out = add(add(Tensor(recon), sub(y, stop_gradient(y))), mul(stop_gradient(eps), delta))
    return out, int(valid.size - np.count_nonzero(valid))


def scaled_apply(y: Tensor, recon, cfg: SurrogateConfig = SurrogateConfig()) -> Tensor:
    """SCALED estimator with no degenerate-group guard; raises if any group has sigma = 0."""
    recon = _check(y, recon)
    axes = _group_axes(y, cfg.sigma_scope) if y.ndim == 4 else None
    if axes is None and y.size < 2:
        raise ValueError("scope group of size 1; need at least 2 elements")
    out, degenerate = _scaled(y, recon, axes, np.finfo(y.dtype).tiny)
    if degenerate:
        raise ZeroDivisionError("compression error has zero spread in a scope group")
    return out


def apply(y: Tensor, recon, cfg: SurrogateConfig = SurrogateConfig(), counter: FallbackCounter = None) -> Tensor:
    """Mode dispatch; with ``scaled``, groups with sigma(eps) < sigma_floor fall back to STE."""
    recon = _check(y, recon)
    if cfg.mode == "ste":
        return ste_apply(y, recon)
    axes = _group_axes(y, cfg.sigma_scope) if y.ndim == 4 else None
    out, degenerate = _scaled(y, recon, axes, cfg.sigma_floor)
    if counter is not None:
        counter.add(degenerate)
    return out


def closed_form_vjp(eps: np.ndarray, g: np.ndarray) -> np.ndarray:
    """J^T g for one flattened group: g - (eps - mean) * (eps . g) / (N sigma^2)."""
    eps = np.ravel(eps).astype(np.float64)
    g = np.ravel(g).astype(np.float64)
    n = eps.size
    centered = eps - eps.mean()
    var = np.mean(centered ** 2)
    return g - centered * (eps @ g) / (n * var)


def jacobian_matrix(eps: np.ndarray) -> np.ndarray:
    """Explicit N x N surrogate Jacobian I - eps (eps - mean)^T / (N sigma^2)."""
    eps = np.ravel(eps).astype(np.float64)
    n = eps.size
    centered = eps - eps.mean()
    return np.eye(n) - np.outer(eps, centered) / (n * np.mean(centered ** 2))
