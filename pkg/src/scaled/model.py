"""ProgDownLite-style learned downsampler.

pre-filter CNN (5 convs, residual) -> bilinear downsample -> restoration CNN (5 convs, residual)
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .resample import bilinear_downsample
from .tensor import Tensor, add, conv2d, leaky_relu

Params = Dict[str, Tensor]

N_LAYERS = 5
KERNEL = 3
CHANNELS = 3
DEFAULT_HIDDEN = 32
DEFAULT_SLOPE = 0.1


def layer_shapes(hidden: int = DEFAULT_HIDDEN, kernel: int = KERNEL) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    for half in ("pre", "post"):
        chans = [CHANNELS] + [hidden] * (N_LAYERS - 1) + [CHANNELS]
        for i in range(N_LAYERS):
            shapes.append((f"{half}.{i}.weight", (chans[i + 1], chans[i], kernel, kernel)))
            shapes.append((f"{half}.{i}.bias", (chans[i + 1],)))
    return shapes


def init_params(seed: int, hidden_channels: int = DEFAULT_HIDDEN, dtype=np.float32) -> Params:
    """Kaiming-normal weights (std sqrt(2/fan_in)), zero biases."""
    if hidden_channels < 1:
        raise ValueError("hidden_channels must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    params = {}
    for name, shape in layer_shapes(hidden_channels):
        if name.endswith("weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def hidden_channels(params: Params) -> int:
    return params["pre.0.weight"].shape[0]


def param_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def expected_param_count(hidden: int, kernel: int = KERNEL) -> int:
    k2 = kernel * kernel
    half = (CHANNELS * hidden * k2 + hidden
            + (N_LAYERS - 2) * (hidden * hidden * k2 + hidden)
            + hidden * CHANNELS * k2 + CHANNELS)
    return 2 * half


def _cnn(x: Tensor, params: Params, half: str, slope: float, trace: Optional[list] = None) -> Tensor:
    h = x
    for i in range(N_LAYERS):
        w = params[f"{half}.{i}.weight"]
        h = conv2d(h, w, params[f"{half}.{i}.bias"], padding=w.shape[-1] // 2)
        if i < N_LAYERS - 1:
            if trace is not None:
                trace.append(h.data)
            h = leaky_relu(h, slope)
    return add(x, h)


def forward(x: Tensor, params: Params, s, slope: float = DEFAULT_SLOPE, trace: Optional[list] = None) -> Tensor:
    """N x 3 x H x W -> N x 3 x even_floor(H s) x even_floor(W s).

    When ``trace`` is a list, every pre-activation array is appended to it.
    """
    if x.ndim != 4 or x.shape[1] != CHANNELS:
        raise ValueError(f"expected an N x 3 x H x W input, got {x.shape}")
    pre = _cnn(x, params, "pre", slope, trace)
    low = bilinear_downsample(pre, s)
    return _cnn(low, params, "post", slope, trace)


def clone_params(params: Params, dtype=None) -> Params:
    return {k: Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=True) for k, v in params.items()}
