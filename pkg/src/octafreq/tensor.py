"""Reverse-mode automatic differentiation over numpy arrays.

Every operation records its inputs and a vector-Jacobian closure on the output
tensor; ``Tensor.backward()`` walks the recorded graph once in reverse
topological order.  Arrays are channels-last: planes are ``(H, W, C)``.
Training math runs in float32; the finite-difference harness promotes
everything to float64 (see :mod:`octafreq.gradcheck`).

Only what the enhancement network needs is implemented -- this is not a
general array library.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "reciprocal",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "relu",
    "gelu",
    "abs_",
    "sum_",
    "mean_",
    "l1_loss",
    "layer_norm",
    "softmax_lastdim",
    "conv2d",
    "pixel_unshuffle",
    "pixel_shuffle",
]

# Thread-local so concurrent inference workers cannot race each other's
# (or the trainer's) recording mode.
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / data preparation)."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A numpy array plus the autodiff bookkeeping attached to it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    # -- backward pass -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf.

        ``grad`` defaults to 1 and must match this tensor's shape.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and node.requires_grad and node._vjp is None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS, reversed (graph depth can exceed the
    recursion limit on deep models)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


class Parameter(Tensor):
    """A trainable leaf tensor with a registry name.

    ``decay_exempt`` marks normalisation gains/shifts and the scalar
    temperature/skip parameters that the optimizer must not weight-decay.
    """

    __slots__ = ("name", "decay_exempt")

    def __init__(self, data, name: str = "", decay_exempt: bool = False):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.decay_exempt = decay_exempt

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def iter_named_parameters(obj, prefix: str = ""):
    """Yield ``(path, Parameter)`` pairs from a nested structure of
    dataclasses, lists/tuples, and dicts, in deterministic field order."""
    import dataclasses

    if obj is None:
        return
    if isinstance(obj, Parameter):
        yield prefix or obj.name or "param", obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            sub = getattr(obj, f.name)
            yield from iter_named_parameters(sub, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, sub in enumerate(obj):
            yield from iter_named_parameters(sub, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key in obj:
            sub = obj[key]
            yield from iter_named_parameters(sub, f"{prefix}.{key}" if prefix else str(key))


# ---------------------------------------------------------------------------
# graph construction helpers
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _make(out, (a,), vjp, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _make(out, (a,), vjp, "reciprocal")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), vjp, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _make(out.astype(x.dtype), (a,), vjp, "gelu")


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), vjp, "abs")


def sum_(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean(dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype),)

    return _make(np.asarray(out), (a,), vjp, "mean")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error (the training objective)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return mean_(abs_(sub(pred, target)))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), vjp, "slice")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dimensions (if any) must match exactly."""
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# normalisation / attention pieces
# ---------------------------------------------------------------------------

def layer_norm(a: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer normalisation over the trailing (channel) axis.

    ``gain`` and ``shift`` have shape ``(C,)``; statistics use the population
    variance of each channel vector.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def vjp(g):
        reduce_axes = tuple(range(x.ndim - 1))
        d_gain = (g * xhat).sum(axis=reduce_axes)
        d_shift = g.sum(axis=reduce_axes)
        gx = g * gain.data
        d_x = inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return d_x, d_gain, d_shift

    return _make(out.astype(x.dtype), (a, gain, shift), vjp, "layer_norm")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically-stabilised softmax over the trailing axis."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s.astype(x.dtype), (a,), vjp, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
#
# 2-D convolution (cross-correlation convention, zero "same" padding) is
# decomposed over kernel offsets: each (i, j) tap contributes one
# (H*W, Cin) @ (Cin, Cout) product.  The input gradient re-scatters through
# the flipped offsets and the kernel gradient is the matching correlation of
# input patches with the output gradient.

def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    return np.pad(x, ((ph, ph), (pw, pw), (0, 0)))


def _conv_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    H, W, Ci = x.shape
    kh, kw, _, Co = k.shape
    xp = _pad_hw(x, kh // 2, kw // 2)
    out = np.zeros((H * W, Co), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + H, j:j + W].reshape(H * W, Ci)
            out += patch @ k[i, j]
    return out.reshape(H, W, Co)


def _conv_input_grad(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the conv input: scatter g back through every tap
    (equivalently a convolution with the 180-degree-rotated kernel)."""
    H, W, Co = g.shape
    kh, kw, Ci, _ = k.shape
    ph, pw = kh // 2, kw // 2
    gp = np.zeros((H + kh - 1, W + kw - 1, Ci), dtype=g.dtype)
    g2 = g.reshape(H * W, Co)
    for i in range(kh):
        for j in range(kw):
            gp[i:i + H, j:j + W] += (g2 @ k[i, j].T).reshape(H, W, Ci)
    return gp[ph:ph + H, pw:pw + W]


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gradient w.r.t. the kernel: correlation of input patches with g."""
    H, W, Ci = x.shape
    Co = g.shape[-1]
    xp = _pad_hw(x, kh // 2, kw // 2)
    g2 = g.reshape(H * W, Co)
    dk = np.empty((kh, kw, Ci, Co), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + H, j:j + W].reshape(H * W, Ci)
            dk[i, j] = patch.T @ g2
    return dk


def _dw_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    H, W, C = x.shape
    kh, kw = k.shape[:2]
    xp = _pad_hw(x, kh // 2, kw // 2)
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += xp[i:i + H, j:j + W] * k[i, j, 0]
    return out


def _dw_input_grad(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    H, W, C = g.shape
    kh, kw = k.shape[:2]
    ph, pw = kh // 2, kw // 2
    gp = np.zeros((H + kh - 1, W + kw - 1, C), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[i:i + H, j:j + W] += g * k[i, j, 0]
    return gp[ph:ph + H, pw:pw + W]


def _dw_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    H, W, C = x.shape
    xp = _pad_hw(x, kh // 2, kw // 2)
    dk = np.empty((kh, kw, 1, C), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dk[i, j, 0] = np.einsum("hwc,hwc->c", xp[i:i + H, j:j + W], g)
    return dk


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           groups: int = 1) -> Tensor:
    """2-D convolution with zero "same" padding.

    ``x`` is ``(H, W, Cin)``; ``kernel`` is ``(kh, kw, Cin/groups, Cout)``
    with odd ``kh``, ``kw``.  ``groups == Cin == Cout`` selects the fast
    depth-wise path; other group counts fall back to a per-group loop.
    """
    H, W, Ci = x.data.shape
    kh, kw, kci, Co = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    if Ci % groups or Co % groups:
        raise ValueError(f"channels ({Ci}->{Co}) not divisible by groups={groups}")
    if kci != Ci // groups:
        raise ValueError(f"kernel expects {kci} input channels per group, "
                         f"got {Ci // groups}")

    depthwise = groups == Ci and Co == Ci and kci == 1

    if depthwise:
        out = _dw_forward(x.data, kernel.data)
    elif groups == 1:
        out = _conv_forward(x.data, kernel.data)
    else:
        cig, cog = Ci // groups, Co // groups
        out = np.empty((H, W, Co), dtype=x.data.dtype)
        for gidx in range(groups):
            out[..., gidx * cog:(gidx + 1) * cog] = _conv_forward(
                x.data[..., gidx * cig:(gidx + 1) * cig],
                kernel.data[..., gidx * cog:(gidx + 1) * cog])
    if bias is not None:
        out = out + bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        if depthwise:
            dx = _dw_input_grad(g, kernel.data)
            dk = _dw_kernel_grad(x.data, g, kh, kw)
        elif groups == 1:
            dx = _conv_input_grad(g, kernel.data)
            dk = _conv_kernel_grad(x.data, g, kh, kw)
        else:
            cig, cog = Ci // groups, Co // groups
            dx = np.empty_like(x.data)
            dk = np.empty_like(kernel.data)
            for gidx in range(groups):
                gs = g[..., gidx * cog:(gidx + 1) * cog]
                ks = kernel.data[..., gidx * cog:(gidx + 1) * cog]
                xs = x.data[..., gidx * cig:(gidx + 1) * cig]
                dx[..., gidx * cig:(gidx + 1) * cig] = _conv_input_grad(gs, ks)
                dk[..., gidx * cog:(gidx + 1) * cog] = _conv_kernel_grad(xs, gs, kh, kw)
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 1))

    return _make(out, parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# pixel reshuffling (resolution <-> channel exchange)
# ---------------------------------------------------------------------------

def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """(H, W, C) -> (H/r, W/r, r*r*C); output channel (dy*r + dx)*C + c holds
    input pixel (r*h + dy, r*w + dx, c)."""
    H, W, C = x.data.shape
    if H % r or W % r:
        raise ValueError(f"spatial dims {(H, W)} not divisible by {r}")
    out = (x.data.reshape(H // r, r, W // r, r, C)
           .transpose(0, 2, 1, 3, 4)
           .reshape(H // r, W // r, r * r * C))

    def vjp(g):
        gi = (g.reshape(H // r, W // r, r, r, C)
              .transpose(0, 2, 1, 3, 4)
              .reshape(H, W, C))
        return (gi,)

    return _make(out, (x,), vjp, "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`: (H, W, r*r*C) -> (r*H, r*W, C)."""
    H, W, C4 = x.data.shape
    if C4 % (r * r):
        raise ValueError(f"channel count {C4} not divisible by {r * r}")
    C = C4 // (r * r)
    out = (x.data.reshape(H, W, r, r, C)
           .transpose(0, 2, 1, 3, 4)
           .reshape(H * r, W * r, C))

    def vjp(g):
        gi = (g.reshape(H, r, W, r, C)
              .transpose(0, 2, 1, 3, 4)
              .reshape(H, W, C4))
        return (gi,)

    return _make(out, (x,), vjp, "pixel_shuffle")
