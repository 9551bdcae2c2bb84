"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (a thread-local
stack), so the tape order is topological by construction.  Outside of a
``with Tape():`` block nothing is recorded and tensors behave like plain
arrays.

Example::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_(x * x)
        tape.backward(loss)
    x.grad  # array([2., 2., 2.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so every node's inputs were
    produced earlier in the list (or are leaves).
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def record(self, op, inputs, output, backward) -> None:
        node = Node(op, tuple(inputs), output, backward)
        output.node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

        The recorded graph is released afterwards unless ``retain_graph``.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None:
            if loss.requires_grad:
                loss.grad = np.ones_like(loss.data) + (0 if loss.grad is None else loss.grad)
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        if not retain_graph:
            self.clear()

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()


def backward(tape: Tape, loss: Tensor, retain_graph: bool = False) -> None:
    tape.backward(loss, retain_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return _make("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def square(x: Tensor) -> Tensor:
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def negative_part(x: Tensor) -> Tensor:
    """Elementwise ``max(-x, 0)``; subgradient 0 at the kink."""
    mask = x.data < 0
    return _make("negative_part", np.where(mask, -x.data, 0.0), (x,), lambda g: (-g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    r = np.sqrt(x.data + eps)
    return _make("sqrt", r, (x,), lambda g: (g / (2.0 * np.maximum(r, 1e-300)),))


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor) -> Tensor:
    return _make("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, float(g) / n),))


def mse_loss(a, b) -> Tensor:
    """Mean of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _make("mse", np.asarray(np.mean(diff * diff)), (a, b),
                 lambda g: (2.0 * float(g) / n * diff, -2.0 * float(g) / n * diff))


def l2_sq(x: Tensor) -> Tensor:
    return _make("l2_sq", np.asarray(np.sum(x.data * x.data)), (x,),
                 lambda g: (2.0 * float(g) * x.data,))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm; subgradient 0 at the origin."""
    r = float(np.sqrt(np.sum(x.data * x.data)))
    return _make("l2_norm", np.asarray(r), (x,),
                 lambda g: (float(g) * x.data / r if r > 0 else np.zeros_like(x.data),))


def l1(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make("l1", np.asarray(np.abs(x.data).sum()), (x,), lambda g: (float(g) * sign,))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make("concat", np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def index(x: Tensor, key) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)
    return _make("index", x.data[key], (x,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.ndim == 1:
            return b.data @ g, np.multiply.outer(a.data, g)
        if b.ndim == 1:
            return np.multiply.outer(g, b.data), np.einsum("...mn,...m->n", a.data, g)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make("matmul", a.data @ b.data, (a, b), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make("log_softmax", out, (x,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (N, K) against integer ``labels``."""
    labels = np.asarray(labels, dtype=int)
    logp = log_softmax(logits, axis=-1)
    n = logits.shape[0]
    picked = index(logp, (np.arange(n), labels))
    return mul(sum_(picked), -1.0 / n)


# ---------------------------------------------------------------- image ops

def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, width)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``kernel`` is
    (C_out, C_in, k, k).  ``pad`` defaults to "same" padding ``(k-1)//2``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and 4-D kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if x.shape[-3] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[-3]}, kernel expects {c_in}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    pad = (k - 1) // 2 if pad is None else pad
    xp = _pad_hw(x.data, pad)
    hp, wp = xp.shape[-2:]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    lead = xp.shape[:-3]

    def taps():
        for i in range(k):
            for j in range(k):
                yield i, j, (slice(i, i + stride * (ho - 1) + 1, stride),
                             slice(j, j + stride * (wo - 1) + 1, stride))

    # im2col: rows ordered (tap, channel) to match the reshaped kernel below
    cols = np.empty(lead + (k * k, c_in, ho, wo))
    for i, j, (si, sj) in taps():
        cols[..., i * k + j, :, :, :] = xp[..., si, sj]
    cols = cols.reshape(lead + (k * k * c_in, ho * wo))
    w2 = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in))
    out = (w2 @ cols).reshape(lead + (c_out, ho, wo))
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(-1, 1, 1)
        inputs.append(bias)

    def bw(g):
        gf = g.reshape(lead + (c_out, ho * wo))
        gx = gw = None
        if kernel.requires_grad:
            gw2 = gf @ np.swapaxes(cols, -1, -2)
            gw2 = gw2.reshape(-1, c_out, k * k * c_in).sum(axis=0)
            gw = gw2.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (w2.T @ gf).reshape(lead + (k * k, c_in, ho, wo))
            gxp = np.zeros_like(xp)
            for i, j, (si, sj) in taps():
                gxp[..., si, sj] += gcols[..., i * k + j, :, :, :]
            gx = gxp[..., pad:hp - pad, pad:wp - pad] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, c_out, ho * wo).sum(axis=(0, 2)))
        return grads
    return _make("conv2d", out, inputs, bw)


def _linear_interp_matrix(n_in: int, factor: int) -> np.ndarray:
    # half-pixel centres: src = (dst + 0.5) / factor - 0.5, clamped at the border
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample(x: Tensor, factor: int = 2, mode: str = "nearest") -> Tensor:
    """Upsample the last two axes by an integer factor."""
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    h, w = x.shape[-2:]
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

        def bw(g):
            s = g.reshape(g.shape[:-2] + (h, factor, w, factor))
            return (s.sum(axis=(-3, -1)),)
    elif mode == "bilinear":
        mh = _linear_interp_matrix(h, factor)
        mw = _linear_interp_matrix(w, factor)
        out = mh @ x.data @ mw.T

        def bw(g):
            return (mh.T @ g @ mw,)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return _make("upsample", out, (x,), bw)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping box average over ``factor`` x ``factor`` blocks."""
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool factor {factor} must divide {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // factor, factor, w // factor, factor))
    out = blocks.mean(axis=(-3, -1))

    def bw(g):
        up = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (up / (factor * factor),)
    return _make("avg_pool", out, (x,), bw)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each channel of (C,H,W) or (N,C,H,W) to zero mean, unit variance."""
    if x.shape[-1] * x.shape[-2] < 2:
        raise ShapeError(f"instance_norm needs at least 2 pixels per channel, got {x.shape}")
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _make("instance_norm", xhat, (x,), bw)


def tv_iso(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Mean isotropic total variation of the last two axes (forward differences)."""
    dx = np.zeros_like(x.data)
    dy = np.zeros_like(x.data)
    dx[..., :, :-1] = x.data[..., :, 1:] - x.data[..., :, :-1]
    dy[..., :-1, :] = x.data[..., 1:, :] - x.data[..., :-1, :]
    mag = np.sqrt(dx * dx + dy * dy + eps)
    n = mag.size

    def bw(g):
        gx_ = float(g) / n * dx / mag
        gy_ = float(g) / n * dy / mag
        out = np.zeros_like(x.data)
        out[..., :, 1:] += gx_[..., :, :-1]
        out[..., :, :-1] -= gx_[..., :, :-1]
        out[..., 1:, :] += gy_[..., :-1, :]
        out[..., :-1, :] -= gy_[..., :-1, :]
        return (out,)
    return _make("tv", np.asarray(mag.mean()), (x,), bw)


# ---------------------------------------------------------------- oracle

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def value_and_grad(f: Callable[..., Tensor], *arrays: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``f`` on fresh leaves built from ``arrays`` and return its gradients."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
        tape.backward(out)
    return out.item(), [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                        for leaf in leaves]
