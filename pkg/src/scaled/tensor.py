"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable primitive records a :class:`Node` on creation. Node ids
come from a global monotone counter, so sorting reachable nodes by id gives a
topological order without an explicit graph walk at backward time.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

_node_ids = itertools.count()

DEFAULT_DTYPE = np.float32


class Node:
    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op})"


class Tensor:
    """Shaped array with an optional link to the tape node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", node={self.node.id}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mean(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, tuple(inputs), backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients reduced back)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=True),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; the result is a fresh leaf, so nothing flows back to ``x``."""
    return Tensor(x.data.copy())


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * x.dtype.type(slope)),)

    return _record("leaky_relu", out, (x,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype, copy=False), (-ga).astype(b.dtype, copy=False)

    return _record("mse", np.asarray(np.mean(diff * diff), dtype=a.dtype), (a, b), backward)


def std_dev(x: Tensor, axis=None) -> Tensor:
    """Population standard deviation (divisor N), optionally over ``axis`` with keepdims.

    Groups with zero spread get a zero subgradient instead of NaN.
    """
    if axis is None:
        n = x.size
        if n < 2:
            raise ValueError("std_dev needs at least 2 elements")
        centered = x.data - x.data.mean()
        sigma = np.asarray(np.sqrt(np.mean(centered * centered)), dtype=x.dtype)
    else:
        axis = tuple(np.atleast_1d(axis))
        n = int(np.prod([x.shape[a] for a in axis]))
        if n < 2:
            raise ValueError("std_dev needs at least 2 elements per group")
        centered = x.data - x.data.mean(axis=axis, keepdims=True)
        sigma = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(sigma > 0, g / (n * sigma), 0.0)
        return ((centered * scale).astype(x.dtype, copy=False),)

    return _record("std_dev", sigma, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding. Shapes: NCHW, OIKK, O."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ValueError("conv2d supports square kernels only")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError("kernel does not fit in padded input")
    out = _correlate(xp, weight.data)
    inputs: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
        inputs = (x, weight, bias)
    h, w_ = x.shape[2], x.shape[3]

    def backward(g):
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])).astype(weight.dtype, copy=False)
        gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gxp = _correlate(gpad, wflip)
        gx = gxp[:, :, p:p + h, p:p + w_]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
        return tuple(grads)

    return _record("conv2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# separable linear operators (resamplers, block transforms, padding)
# ---------------------------------------------------------------------------


def separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "separable") -> Tensor:
    """Apply ``rows @ X @ cols.T`` to every HxW plane of an NCHW tensor."""
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _record(op, out, (x,), backward)


# ---------------------------------------------------------------------------
# tape traversal
# ---------------------------------------------------------------------------


def _reachable(root: Tensor) -> List[Node]:
    seen = set()
    nodes = []
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node is None or node.id in seen:
            continue
        seen.add(node.id)
        nodes.append(node)
        stack.extend(t.node for t in node.inputs if t.node is not None)
    nodes.sort(key=lambda n: n.id, reverse=True)
    return nodes


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each leaf tensor to the gradient it received in this call.
    ``grad`` seeds the output cotangent and is only allowed for non-scalar outputs
    when computing vector-Jacobian products.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    grad = np.asarray(grad, dtype=loss.dtype)
    if grad.shape != loss.shape:
        raise ValueError("seed gradient shape must match output shape")
    produced: Dict[Tensor, np.ndarray] = {}
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = grad if loss.grad is None else loss.grad + grad
            produced[loss] = grad
        return produced
    pending: Dict[int, np.ndarray] = {loss.node.id: grad}
    for node in _reachable(loss):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        for t, tg in zip(node.inputs, node.backward(g)):
            if not t.requires_grad or tg is None:
                continue
            if t.node is not None:
                prev = pending.get(t.node.id)
                pending[t.node.id] = tg if prev is None else prev + tg
            else:
                prev = produced.get(t)
                produced[t] = tg if prev is None else prev + tg
    for t, tg in produced.items():
        t.grad = tg.copy() if t.grad is None else t.grad + tg
    return produced


def vjp(fn: Callable[..., Tensor], inputs: Sequence[Tensor], cotangent: np.ndarray) -> List[np.ndarray]:
    """Vector-Jacobian product of ``fn`` at ``inputs`` for a given output cotangent."""
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = fn(*leaves)
    backward(out, cotangent)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), 1e-12)
    return num / den


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                       h: float = 1e-5, entries: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central differences of a scalar ``fn`` with respect to ``inputs[index]`` (64-bit)."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    target = arrays[index]
    flat = target.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig - h
        fm = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(target.shape)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error between tape gradients and central differences over all inputs.

    With ``max_entries`` only a random subset of coordinates per input is compared.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = np.zeros_like(arrays[i]) if leaf.grad is None else leaf.grad
        if max_entries is not None and arrays[i].size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = np.sort(rng.choice(arrays[i].size, size=max_entries, replace=False))
            numeric = numerical_gradient(fn, arrays, i, h, entries).reshape(-1)[entries]
            analytic = analytic.reshape(-1)[entries]
        else:
            numeric = numerical_gradient(fn, arrays, i, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``. Missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state
