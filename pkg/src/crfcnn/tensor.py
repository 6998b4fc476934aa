"""Dense tensors with a recording tape and reverse-mode gradients.

Every op takes and returns :class:`Tensor`. When a :class:`Tape` is active
and at least one input requires a gradient, the op appends a record holding
its inputs, its output and a closure mapping the output gradient to input
gradients. :func:`backward` replays those records in reverse.

Spatial tensors are laid out ``[C, H, W]`` or batched ``[B, C, H, W]``; the
channel axis is always ``-3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvKernel",
    "conv_backend",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "add_n",
    "avg_pool2",
    "backward",
    "concat",
    "conv2d",
    "mean",
    "neg",
    "relu",
    "scale",
    "scaled_softmax",
    "select",
    "sgd_step",
    "sigmoid",
    "spatial_softmax_nll",
    "tensor_sum",
]

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __neg__(self) -> Tensor:
        return neg(self)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the block are recorded.
    A tape belongs to one forward pass and is not reentrant.
    """

    _active: list["Tape"] = []

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = Tape.current()
    if tape is not None and out.requires_grad:
        tape.records.append(_Record(out, tuple(inputs), grad_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ValueError("add_n shape mismatch")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    return _emit(total, tensors, lambda g: [g] * len(tensors))


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def scaled_softmax(x: Tensor, alpha: float = 0.5, beta: float = 1.0) -> Tensor:
    """``beta * exp(alpha*x) / sum_c exp(alpha*x)`` over the channel axis (-3)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if x.data.ndim < 3:
        raise ValueError("scaled_softmax expects [..., C, H, W]")
    z = alpha * x.data
    z = z - z.max(axis=-3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-3, keepdims=True)
    y = beta * p

    def grad_fn(g):
        return (alpha * y * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return _emit(y, (x,), grad_fn)


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: np.split(g, cuts, axis=axis),
    )


def select(x: Tensor, start: int, stop: int, axis: int = -3) -> Tensor:
    """Slice ``[start:stop]`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit(x.data[index], (x,), grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    y = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _emit(y, (x,), grad_fn)


# ---------------------------------------------------------------- convolution


@dataclass
class ConvKernel:
    """Same-padded 2-D convolution weights ``[out, in, kh, kw]`` plus bias ``[out]``."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.weight.data.ndim != 4:
            raise ValueError("kernel weight must be [out, in, kh, kw]")
        _, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extent must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias must have one entry per output channel")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_height(self) -> int:
        return self.weight.shape[2]

    @property
    def kernel_width(self) -> int:
        return self.weight.shape[3]

    @classmethod
    def from_arrays(cls, weight, bias=None, requires_grad: bool = False) -> "ConvKernel":
        weight = np.asarray(weight, dtype=DEFAULT_DTYPE)
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=weight.dtype)
        return cls(Tensor(weight, requires_grad=requires_grad), Tensor(bias, requires_grad=requires_grad))

    @classmethod
    def identity(cls, channels: int, size: int = 1) -> "ConvKernel":
        w = np.zeros((channels, channels, size, size))
        w[np.arange(channels), np.arange(channels), size // 2, size // 2] = 1.0
        return cls.from_arrays(w)

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int, size: int) -> "ConvKernel":
        return cls.from_arrays(np.zeros((out_channels, in_channels, size, size)))


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return sliding_window_view(np.pad(x, pad), (kh, kw), axis=(-2, -1))


def _correlate_numpy(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x [B, C, H, W], w [O, C, kh, kw] -> [B, O, H, W]
    _, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        return np.einsum("bchw,oc->bohw", x, w[:, :, 0, 0], optimize=True)
    win = _windows(x, kh, kw)  # [B, C, H, W, kh, kw]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, H, W, O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


class _NumpyConv:
    name = "numpy"

    @staticmethod
    def forward(x, w, b):
        return _correlate_numpy(x, w) + b[:, None, None]

    @staticmethod
    def backward(x, w, g, need_x):
        kh, kw = w.shape[2:]
        if kh == 1 and kw == 1:
            gw = np.einsum("bohw,bchw->oc", g, x, optimize=True)[:, :, None, None]
        else:
            gw = np.tensordot(g, _windows(x, kh, kw), axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if need_x:
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _correlate_numpy(g, flipped)
        return gx, gw


class _TorchConv:
    name = "torch"

    def __init__(self, torch):
        self.torch = torch
        self.F = torch.nn.functional
        self.grad = torch.nn.grad

    def forward(self, x, w, b):
        t = self.torch
        p = (w.shape[2] // 2, w.shape[3] // 2)
        return self.F.conv2d(t.from_numpy(x), t.from_numpy(w), t.from_numpy(b), padding=p).numpy()

    def backward(self, x, w, g, need_x):
        t = self.torch
        p = (w.shape[2] // 2, w.shape[3] // 2)
        xt, wt, gt = t.from_numpy(x), t.from_numpy(w), t.from_numpy(np.ascontiguousarray(g))
        gw = self.grad.conv2d_weight(xt, wt.shape, gt, padding=p).numpy()
        gx = self.grad.conv2d_input(xt.shape, wt, gt, padding=p).numpy() if need_x else None
        return gx, gw


def _pick_backend():
    try:
        import torch
    except ImportError:  # pragma: no cover - exercised only without torch
        return _NumpyConv()
    return _TorchConv(torch)


def conv_backend(name: str | None = None) -> str:
    """Name of the active convolution implementation; pass ``name`` to switch."""
    global _CONV
    if name is not None:
        if name == "numpy":
            _CONV = _NumpyConv()
        elif name == "torch":
            import torch

            _CONV = _TorchConv(torch)
        else:
            raise ValueError(f"unknown conv backend {name!r}")
    return _CONV.name


_CONV = _pick_backend()


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Zero-padded 'same' cross-correlation; accepts ``[C,H,W]`` or ``[B,C,H,W]``."""
    w, b = kernel.weight, kernel.bias
    if x.data.ndim not in (3, 4):
        raise ValueError(f"conv2d expects [C,H,W] or [B,C,H,W], got {x.shape}")
    if x.shape[-3] != kernel.in_channels:
        raise ValueError(
            f"channel mismatch: input has {x.shape[-3]}, kernel expects {kernel.in_channels}"
        )
    batched = x.data.ndim == 4
    dt = np.result_type(x.data, w.data)
    xd = np.ascontiguousarray(x.data if batched else x.data[None], dtype=dt)
    wd = np.ascontiguousarray(w.data, dtype=dt)
    backend = _CONV
    y = backend.forward(xd, wd, np.ascontiguousarray(b.data, dtype=dt))

    def grad_fn(g):
        gb = g if batched else g[None]
        gx, gw = backend.backward(xd, wd, gb, x.requires_grad)
        if gx is not None and not batched:
            gx = gx[0]
        return (gx, gw, gb.sum(axis=(0, 2, 3)))

    return _emit(y if batched else y[0], (x, w, b), grad_fn)


# ---------------------------------------------------------------- losses


def spatial_softmax_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-probability of each target cell under a softmax over H*W.

    ``logits`` is ``[B, N, H, W]``; ``targets`` holds flat row-major cell indices
    ``[B, N]``; ``mask`` ``[B, N]`` zeroes out absent joints. Returns 0 when no
    joint is present.
    """
    b, n, h, w = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(b, n)
    mask = np.asarray(mask, dtype=logits.dtype).reshape(b, n)
    flat = logits.data.reshape(b, n, h * w)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    count = mask.sum()
    denom = count if count > 0 else 1.0
    loss = ((lse - picked) * mask).sum() / denom

    def grad_fn(g):
        p = np.exp(shifted - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return ((p * (mask / denom * g)[..., None]).reshape(b, n, h, w),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)


# ---------------------------------------------------------------- autodiff


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Gradients are accumulated into ``.grad`` of every leaf tensor that requires
    one (existing ``.grad`` buffers are added to, so call ``zero_grad`` between
    steps). Returns the gradient map keyed by ``id(tensor)``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.records or not any(r.out is loss for r in tape.records):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.out) for r in tape.records}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    leaves: dict[int, np.ndarray] = {}
    for rec in tape.records:
        for inp in rec.inputs:
            key = id(inp)
            if key in produced or key not in grads or key in leaves:
                continue
            g = np.asarray(grads[key], dtype=inp.dtype).reshape(inp.shape)
            inp.grad = g if inp.grad is None else inp.grad + g
            leaves[key] = inp.grad
    return leaves


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    lr: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """In-place ``p <- p - lr * g`` (with optional heavy-ball momentum).

    ``grads`` defaults to each parameter's ``.grad``; missing gradients count
    as zero.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if momentum and velocity is not None:
            v = velocity.get(name)
            v = g if v is None else momentum * v + g
            velocity[name] = v
            g = v
        p.data = p.data - lr * g
    return params


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
