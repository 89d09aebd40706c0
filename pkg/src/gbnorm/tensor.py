"""Dense tensors with reverse-mode differentiation over an explicit tape.

Operations are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), labels)
        tape.backward(loss)

Outside a tape every op is a plain forward computation. Gradients are
accumulated (``+=``) into leaf tensors created with ``requires_grad=True``;
running backward twice on the same tape therefore doubles them.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "matmul",
    "add",
    "add_bias",
    "mul",
    "relu",
    "reshape",
    "flatten",
    "reduce",
    "conv2d",
    "maxpool2d",
    "softmax_cross_entropy",
    "backward",
    "custom_op",
]


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class TapeError(RuntimeError):
    """Backward requested on a tensor that is not recorded on the tape."""


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A copy that is off the tape and never receives gradient."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)

    def max(self, axes=None):
        return reduce(self, "max", axes)

    def min(self, axes=None):
        return reduce(self, "min", axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Ops are appended in execution order, so inputs are always recorded
    before the ops that consume them. ``backward`` walks the record in
    reverse and visits every op at most once.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def _assign(self, t: Tensor) -> None:
        t.node_id = self._next_id
        t._tape = self
        self._next_id += 1

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        for t in inputs:
            if t._tape is not self and t.requires_grad:
                # leaf (parameter or user input) first seen on this tape
                self._assign(t)
                self._leaves[t.node_id] = t
        self._assign(output)
        self.ops.append(_Op(name, tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=np.float64)}
        for op in reversed(self.ops):
            g = grads.pop(op.output.node_id, None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad or t._tape is not self:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for nid, g in grads.items():
            leaf = self._leaves.get(nid)
            if leaf is None:
                continue
            g = g.astype(leaf.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Seed d(loss)=1 and accumulate gradients into every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not computed under an active Tape")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, inputs, out, backward_fn)
    return out


def custom_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward_fn(g)`` returns one grad per input."""
    return _result(name, data, inputs, backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def _bw(g):
        return g @ B.T, A.T @ g

    return _result("matmul", A @ B, (a, b), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _result("mul", A * B, (a, b), lambda g: (g * B, g * A))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[N, C, ...] + b[C], broadcasting along the channel axis only."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim < 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    red = (0,) + tuple(range(2, x.ndim))

    def _bw(g):
        return g, g.sum(axis=red, dtype=np.float64)

    return _result("add_bias", x.data + _channel_view(b.data, x.ndim), (x, b), _bw)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at exactly 0
    return _result("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from e
    return _result("reshape", out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for a {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(x: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Sum/mean/max/min over ``axes`` (all axes when None).

    Accumulation is always 64-bit. For max/min the gradient goes to the
    lowest flat index among tied extrema.
    """
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    src_shape = x.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(src_shape))
    count = int(np.prod([src_shape[a] for a in axes])) if axes else 1

    if kind in ("sum", "mean"):
        total = x.data.sum(axis=axes, dtype=np.float64, keepdims=True)
        if kind == "mean":
            if count == 0:
                raise ValueError("mean over an empty extent")
            total = total / count
        scale = 1.0 if kind == "sum" else 1.0 / count

        def _bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) * scale, src_shape).copy(),)

    elif kind in ("max", "min"):
        if count == 0:
            raise ValueError(f"{kind} over an empty extent")
        rest = [i for i in range(x.ndim) if i not in axes]
        moved = np.moveaxis(x.data, axes, range(len(rest), x.ndim))
        moved_shape = moved.shape
        flat = moved.reshape(moved_shape[: len(rest)] + (-1,))
        pick = np.argmax(flat, axis=-1) if kind == "max" else np.argmin(flat, axis=-1)
        total = np.take_along_axis(flat, pick[..., None], axis=-1).astype(np.float64)
        total = total.reshape(kept_shape)

        def _bw(g):
            gf = np.zeros(flat.shape, dtype=np.float64)
            np.put_along_axis(gf, pick[..., None], g.reshape(pick.shape + (1,)), axis=-1)
            gm = gf.reshape(moved_shape)
            return (np.moveaxis(gm, range(len(rest), x.ndim), axes),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")

    out = total if keepdims else total.reshape(tuple(n for i, n in enumerate(src_shape) if i not in axes))
    return _result(kind, out.astype(x.dtype), (x,), _bw)


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernel[F,C,kh,kw] via im2col."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / padding={padding}")
    f, c, kh, kw = kernel.shape
    n, _, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (gm.T @ cols).reshape(kernel.shape)
        dx = _col2im(gm @ kmat, x.shape, kh, kw, stride, padding, ho, wo)
        return dx, dk

    return _result("conv2d", np.ascontiguousarray(out), (x, kernel), _bw)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (window == stride); ties go to the first element."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool2d: {h}x{w} is not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    pick = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, pick[..., None], axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros(blocks.shape, dtype=np.float64)
        np.put_along_axis(gb, pick[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _result("maxpool2d", out, (x,), _bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N×K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.dtype.kind not in "iu":
        raise ValueError("labels must be integer class indices")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def _bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g.reshape(-1)[0]) / n),)

    return _result("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), _bw)
