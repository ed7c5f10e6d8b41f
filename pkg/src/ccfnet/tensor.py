"""Minimal reverse-mode differentiable tensor engine on top of numpy.

Only the operations the network and the losses need are provided. Every
operation returns a new :class:`Tensor`; when any input requires a gradient
the result remembers its inputs and a closure mapping the output gradient to
input gradients. :func:`backward` orders those records topologically (the
:class:`Tape`) and replays them in reverse.

Training runs in float32. Gradient checks cast everything to float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Incompatible or degenerate tensor shapes."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another dtype (gradient flag preserved)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered record of the operations behind a tensor.

    ``nodes[i]`` only depends on tensors that appear before it.
    """

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Pixel-wise addition. Tensor-tensor addition requires equal shapes."""
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t and a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    a = as_tensor(a, b if b_t else None)
    b = as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    b_t = isinstance(b, Tensor)
    a = as_tensor(a, b if b_t else None)
    b = as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a_t = isinstance(a, Tensor)
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a if a_t else None)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return _result(x.data * x.data, (x,), bw, "square")


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), bw, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result(np.clip(x.data, lo, hi), (x,), bw, "clip")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) form avoids overflow for large negative inputs
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), bw, "sigmoid")


def smooth_l1(d: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5·d²/β below β, |d| − 0.5·β above."""
    ad = np.abs(d.data)
    small = ad < beta
    out = np.where(small, 0.5 * d.data * d.data / beta, ad - 0.5 * beta)

    def bw(g):
        return (g * np.where(small, d.data / beta, np.sign(d.data)),)

    return _result(out.astype(d.dtype, copy=False), (d,), bw, "smooth_l1")


# ---------------------------------------------------------------------------
# Reductions and views
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return _result(out, (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""

    def bw(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _result(x.data[index], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Channel-wise concatenation; all other extents must agree."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# Convolution, pooling, resampling, normalization
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (B, Cin, H, W) and ``weight`` is (Cout, Cin, Kh, Kw).
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"bad conv args stride={stride} padding={padding} dilation={dilation}")
    B, C, H, W = x.shape
    Cout, Cin, Kh, Kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d: kernel expects {Cin} input channels, got {C}")
    Ho = conv_output_size(H, Kh, stride, padding, dilation)
    Wo = conv_output_size(W, Kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: degenerate output {Ho}x{Wo} for input {H}x{W}")

    xd, wd = x.data, weight.data
    if Kh == Kw == 1 and stride == 1 and padding == 0:
        cols = None
        out = np.einsum("oc,bchw->bohw", wd[:, :, 0, 0], xd, optimize=True)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        span_h, span_w = dilation * (Kh - 1) + 1, dilation * (Kw - 1) + 1
        win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
        win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride, ::dilation, ::dilation]
        # im2col: (B, Ho, Wo, Cin*Kh*Kw)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * Kh * Kw)
        out = (cols @ wd.reshape(Cout, -1).T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if cols is None:
            if weight.requires_grad:
                gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gx = np.einsum("oc,bohw->bchw", wd[:, :, 0, 0], g, optimize=True)
            return gx, gw, gb
        gt = g.transpose(0, 2, 3, 1).reshape(-1, Cout)  # (B*Ho*Wo, Cout)
        if weight.requires_grad:
            gw = (gt.T @ cols.reshape(-1, C * Kh * Kw)).reshape(wd.shape)
        if x.requires_grad:
            gcols = (gt @ wd.reshape(Cout, -1)).reshape(B, Ho, Wo, C, Kh, Kw)
            gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
            for ki in range(Kh):
                r0 = ki * dilation
                for kj in range(Kw):
                    c0 = kj * dilation
                    gxp[:, :, r0 : r0 + stride * (Ho - 1) + 1 : stride, c0 : c0 + stride * (Wo - 1) + 1 : stride] += (
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum over a −inf padded input.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    if padding >= kernel:
        raise ValueError(f"maxpool2d: padding {padding} must be smaller than kernel {kernel}")
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kernel, stride, padding, 1)
    Wo = conv_output_size(W, kernel, stride, padding, 1)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d: degenerate output {Ho}x{Wo} for input {H}x{W}")
    xd = x.data
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    else:
        xp = xd
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for t in range(kernel * kernel):
            ki, kj = divmod(t, kernel)
            gxp[:, :, ki : ki + stride * (Ho - 1) + 1 : stride, kj : kj + stride * (Wo - 1) + 1 : stride] += g * (arg == t)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor×factor block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    B, C, H, W = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None], (B, C, H, factor, W, factor)
    ).reshape(B, C, H * factor, W * factor)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _result(np.ascontiguousarray(out), (x,), bw, "upsample")


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm2d(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Batch normalization over (B, H, W) per channel.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    B, C, H, W = x.shape
    gamma = state.gamma.data.reshape(1, C, 1, 1)
    beta = state.beta.data.reshape(1, C, 1, 1)
    xd = x.data
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ShapeError("batchnorm2d: train mode needs more than one value per channel")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * invstd
        if _grad_enabled:
            m = state.momentum
            state.running_mean[:] = (1 - m) * state.running_mean + m * mu.reshape(C)
            state.running_var[:] = (1 - m) * state.running_var + m * var.reshape(C) * (n / (n - 1))
    elif mode == "eval":
        n = None
        invstd = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(1, C, 1, 1).astype(xd.dtype)
        xhat = (xd - state.running_mean.reshape(1, C, 1, 1).astype(xd.dtype)) * invstd
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    out = (xhat * gamma + beta).astype(xd.dtype, copy=False)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if n is None:
            gx = gxhat * invstd
        else:
            gx = (invstd / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return _result(out, (x, state.gamma, state.beta), bw, "batchnorm2d")
