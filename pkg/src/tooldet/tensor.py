"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation produces a new :class:`Tensor` whose ``_record``
holds the inputs and a closure mapping the upstream gradient to one gradient
per input. :func:`backward` orders the records topologically and walks them
once in reverse.

Convolution uses the cross-correlation convention (no kernel flip), matching
every deep-learning framework.

Precision is a global engine setting: 32-bit for training, 64-bit for gradient
verification. Switch with :func:`set_precision` or the :func:`precision`
context manager.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32
_ids = itertools.count()


class InvalidShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward value is NaN or infinite."""


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the engine precision."""
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional value participating in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_record")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.require(data, dtype=_DTYPE, requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self._record: OpRecord | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar, all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {what}")


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and register its backward rule.

    ``backward`` receives the upstream gradient and returns one gradient (or
    ``None``) per input, in order.
    """
    _check_finite(data, op)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = OpRecord(op, tuple(inputs), out, backward)
    return out


@dataclass
class Graph:
    """Operation records reachable from an output, in topological order."""

    records: list[OpRecord] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[OpRecord] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            rec = node._record
            if rec is None:
                continue
            if expanded:
                order.append(rec)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for t in rec.inputs:
                if t._record is not None and t.node_id not in seen:
                    stack.append((t, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    When ``wrt`` is given, returns their gradients; tensors unreachable from
    ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = None if wrt is None else list(wrt)
    # gradients of interior (non-leaf) tensors are only kept when asked for
    wanted = {t.node_id for t in wrt or () if t._record is not None}
    interior: dict[int, np.ndarray] = {}
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(graph.records):
        g_out = grads.pop(rec.output.node_id, None)
        if g_out is None:
            continue
        if rec.output.node_id in wanted:
            interior[rec.output.node_id] = g_out
        for t, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            _check_finite(g, f"backward of {rec.op}")
            if t._record is None:
                t.grad = g.astype(_DTYPE, copy=True) if t.grad is None else t.grad + g
            elif t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + g
            else:
                grads[t.node_id] = g
    if loss._record is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    if wrt is None:
        return None
    out = []
    for t in wrt:
        g = interior.get(t.node_id) if t._record is not None else t.grad
        out.append(np.zeros_like(t.data) if g is None else g)
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise InvalidShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shaped tensor or constant array."""
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise InvalidShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return record_op("scale", x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    return record_op(
        "sum", np.asarray(x.data.sum(), dtype=_DTYPE).reshape(()), (x,),
        lambda g: (np.full(x.shape, g, dtype=x.dtype),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise InvalidShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return record_op("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(
        "transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def take(x: Tensor, indices) -> Tensor:
    """Gather entries of the flattened tensor; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        out = np.zeros(x.data.size, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1))
        return (out.reshape(x.shape),)

    return record_op("take", x.data.reshape(-1)[idx], (x,), back)


def take_rows(x: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    if x.ndim != 2:
        raise InvalidShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    width = x.shape[1]
    idx = rows[:, None] * width + np.arange(width)[None, :]
    return take(x, idx)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.ndim != b.ndim or any(
        da != db for i, (da, db) in enumerate(zip(a.shape, b.shape)) if i != axis
    ):
        raise InvalidShapeError(f"concat: shapes {a.shape} and {b.shape} disagree off axis {axis}")
    split = a.shape[axis]

    def back(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return record_op("concat", np.concatenate([a.data, b.data], axis=axis), (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Row softmax of an [N, K] tensor, computed with max subtraction."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidShapeError(f"softmax expects [N, K>=2], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record_op("softmax", p, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidShapeError(f"log_softmax expects [N, K>=2], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return record_op("log_softmax", out, (x,), back)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as [in, out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise InvalidShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def back(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return record_op("linear", x.data @ weight.data + bias.data, (x, weight, bias), back)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of [N,C,H,W] input with a [K,C,kh,kw] kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise InvalidShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if bias.shape != (k,):
        raise InvalidShapeError(f"conv2d: bias {bias.shape} does not match {k} filters")
    if stride < 1:
        raise InvalidShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise InvalidShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)  # im2col
    wmat = kernel.data.reshape(k, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (g2.T @ cols).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return record_op("conv2d", np.ascontiguousarray(out), (x, kernel, bias), back)


def max_pool(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the first maximal element of each window."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise InvalidShapeError(f"max_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise InvalidShapeError(f"max_pool: window {window} exceeds spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                sel = g * (arg == i * window + j)
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel
        return (gx,)

    return record_op("max_pool", np.ascontiguousarray(out), (x,), back)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    The error for one entry is ``|a - n| / max(1, |a|, |n|)``. With
    ``max_entries`` only that many randomly chosen entries per input are probed.
    Must run in 64-bit mode.
    """
    if _DTYPE is not np.float64:
        raise RuntimeError("grad_check requires 64-bit precision")
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    analytic = backward(fn(*inputs), wrt=inputs)
    worst = 0.0
    for k, (t, a) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = rng.choice(flat.size, size=max_entries, replace=False)
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + eps
            up = float(fn(*inputs).data)
            flat[pos] = orig - eps
            down = float(fn(*inputs).data)
            flat[pos] = orig
            numeric = (up - down) / (2 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"non-finite numeric gradient at input {k}, entry {pos}")
            ana = float(a.reshape(-1)[pos])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    return worst
