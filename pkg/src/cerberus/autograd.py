"""Tape-based reverse-mode differentiation over numpy arrays.

Operations performed while a :class:`Tape` is active are recorded in execution
order. ``Tape.backward`` walks the record in reverse and accumulates gradients
into every leaf tensor that requires them.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import inspect
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
CHECK_FINITE = True

_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf that requires grad.

        Gradients are also accumulated into ``leaf.grad``. A tape can only be
        differentiated once.
        """
        if self.consumed:
            raise GradError("backward called on a consumed tape")
        if loss.data.size != 1:
            raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise GradError("backward called on an empty tape")
        self.consumed = True

        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            if len(in_grads) != len(node.inputs):
                raise GradError(
                    f"{node.op}: backward returned {len(in_grads)} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise GradError(
                        f"{node.op}: gradient shape {ig.shape} does not match input {inp.shape}"
                    )
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + ig
                else:
                    grads[k] = ig
                    keep[k] = inp
        self.nodes.clear()

        out: dict[Tensor, np.ndarray] = {}
        for k, g in grads.items():
            if k in produced:
                continue
            t = keep[k]
            if not t.requires_grad:
                continue
            out[t] = g
            t.grad = g if t.grad is None else t.grad + g
        return out


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def record_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Wrap ``out_data`` as a tensor and register ``backward`` on the active tape."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return record_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return record_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return record_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return record_op(
        "div", (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return record_op("pow", (a,), a.data ** p, lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return record_op("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record_op("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record_op("relu", (a,), a.data * mask, lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record_op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def cross(a, b) -> Tensor:
    """Cross product along the last axis (size 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError(f"cross: last axis must be 3, got {a.shape} and {b.shape}")
    return record_op(
        "cross", (a, b), np.cross(a.data, b.data),
        lambda g: (
            _unbroadcast(np.cross(b.data, g), a.shape),
            _unbroadcast(np.cross(g, a.data), b.shape),
        ),
    )


# ---------------------------------------------------------------- reductions and shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", (a,), np.asarray(out), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return record_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return record_op("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op("getitem", (a,), np.asarray(a.data[index]), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return record_op("take", (a,), np.take(a.data, idx, axis=axis), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default for NCHW maps)."""
    ts = [as_tensor(t) for t in tensors]
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            x != y for i, (x, y) in enumerate(zip(base, other)) if i != axis % len(base)
        ):
            raise ValueError(
                f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
            )
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record_op(
        "concat", ts, np.concatenate([t.data for t in ts], axis=axis),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ {sorted(shapes)}")
    return record_op(
        "stack", ts, np.stack([t.data for t in ts], axis=axis),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.shape} x {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op("matmul", (a, b), a.data @ b.data, backward)


# ---------------------------------------------------------------- convolution

def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> strided view (N, Ho, Wo, C, k, k)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _scatter_windows(cols: np.ndarray, padded_shape, k: int, s: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: (N, Ho, Wo, C, k, k) summed into (N, C, Hp, Wp)."""
    n, ho, wo, c = cols.shape[:4]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """NCHW convolution with zero padding k//2.

    Output size is H at stride 1 and H//2 at stride 2.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    p = k // 2
    ho, wo = h // stride, wd // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _windows(xp, k, stride, ho, wo).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(co, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(gout):
        g = gout.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g @ wmat).reshape(n, ho, wo, c, k, k)
            gx = _scatter_windows(dcols, xp.shape, k, stride)[:, :, p : p + h, p : p + wd]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", inputs, np.ascontiguousarray(out), backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution, weight (C_in, C_out, k, k), padding (k - stride)//2.

    With k=4, stride=2 the spatial size doubles exactly.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    ci, co, k, _ = w.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    s = stride
    p = (k - s) // 2
    hf, wf = (h - 1) * s + k, (wd - 1) * s + k
    ho, wo = hf - 2 * p, wf - 2 * p
    xf = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = w.data.reshape(c, co * k * k)
    cols = (xf @ wmat).reshape(n, h, wd, co, k, k)
    out = _scatter_windows(cols, (n, co, hf, wf), k, s)[:, :, p : p + ho, p : p + wo]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]

    def backward(gout):
        gp = np.pad(gout, ((0, 0), (0, 0), (p, p), (p, p)))
        dcols = _windows(gp, k, s, h, wd).reshape(n * h * wd, co * k * k)
        gx = (dcols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xf.T @ dcols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv_transpose2d", inputs, np.ascontiguousarray(out), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    return record_op(
        "global_avg_pool", (x,), x.data.mean(axis=(2, 3)),
        lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),),
    )


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the last two (H, W) axes; the per-map max is subtracted first."""
    x = as_tensor(x)
    lead = x.shape[:-2]
    flat = x.data.reshape(*lead, -1)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    p = (e / e.sum(axis=-1, keepdims=True)).reshape(x.shape)

    def backward(g):
        inner = (g * p).sum(axis=(-2, -1), keepdims=True)
        return (p * (g - inner),)

    return record_op("spatial_softmax", (x,), p, backward)


def grid_expectation(p: Tensor, values) -> Tensor:
    """Weighted sum over the pixel grid: sum_{y,x} p[..., y, x] * values[..., y, x]."""
    p, values = as_tensor(p), as_tensor(values)
    _check_broadcast("grid_expectation", p, values)
    prod = p.data * values.data
    return record_op(
        "grid_expectation", (p, values), prod.sum(axis=(-2, -1)),
        lambda g: (
            _unbroadcast(g[..., None, None] * values.data, p.shape) if p.requires_grad else None,
            _unbroadcast(g[..., None, None] * p.data, values.shape) if values.requires_grad else None,
        ),
    )


def quat_normalize(q: Tensor) -> Tensor:
    """Normalize quaternions along the last axis; zero quaternions are rejected."""
    q = as_tensor(q)
    if q.shape[-1] != 4:
        raise ValueError(f"quat_normalize: last axis must be 4, got {q.shape}")
    norm = np.sqrt((q.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("quat_normalize: zero quaternion")
    out = q.data / norm

    def backward(g):
        return ((g - out * (out * g).sum(axis=-1, keepdims=True)) / norm,)

    return record_op("quat_normalize", (q,), out, backward)


# ---------------------------------------------------------------- custom ops


class CustomOp:
    """A user-defined differentiable operation.

    ``forward(*arrays, **kwargs)`` returns ``(output, saved)``;
    ``backward(saved, grad_output)`` returns one gradient (or None) per input.
    """

    def __init__(self, forward, backward, n_inputs: int, name: str):
        self.forward = forward
        self.backward_fn = backward
        self.n_inputs = n_inputs
        self.name = name

    def __call__(self, *inputs, **kwargs) -> Tensor:
        return self.apply(*inputs, **kwargs)[0]

    def apply(self, *inputs, **kwargs) -> tuple[Tensor, Any]:
        """Like calling the op, but also returns the forward's saved state."""
        if len(inputs) != self.n_inputs:
            raise TypeError(f"{self.name}: expected {self.n_inputs} inputs, got {len(inputs)}")
        ts = [as_tensor(t) for t in inputs]
        out, saved = self.forward(*[t.data for t in ts], **kwargs)

        def backward(g):
            grads = self.backward_fn(saved, g)
            if not isinstance(grads, (tuple, list)) or len(grads) != self.n_inputs:
                n = len(grads) if isinstance(grads, (tuple, list)) else 1
                raise GradError(f"{self.name}: backward returned {n} gradients, expected {self.n_inputs}")
            return tuple(grads)

        return record_op(self.name, ts, np.asarray(out), backward), saved


def _positional_arity(fn) -> int:
    sig = inspect.signature(fn)
    return sum(
        1 for prm in sig.parameters.values()
        if prm.kind in (prm.POSITIONAL_ONLY, prm.POSITIONAL_OR_KEYWORD) and prm.default is prm.empty
    )


def register_custom(forward, backward, *, name: str = "custom", n_inputs: int | None = None,
                    probe: Sequence[Any] | None = None) -> CustomOp:
    """Create a :class:`CustomOp`.

    The input count is read from ``forward``'s signature unless given. When
    ``probe`` inputs are supplied the op is run once forward and backward so a
    gradient arity or shape mismatch fails here rather than mid-training.
    """
    if n_inputs is None:
        n_inputs = _positional_arity(forward)
    op = CustomOp(forward, backward, n_inputs, name)
    if probe is not None:
        arrays = [np.asarray(a, dtype=_DEFAULT_DTYPE) for a in probe]
        if len(arrays) != n_inputs:
            raise GradError(f"{name}: probe has {len(arrays)} inputs, op takes {n_inputs}")
        out, saved = forward(*arrays)
        grads = backward(saved, np.ones_like(np.asarray(out)))
        if not isinstance(grads, (tuple, list)) or len(grads) != n_inputs:
            raise GradError(f"{name}: backward must return {n_inputs} gradients")
        for a, g in zip(arrays, grads):
            if g is not None and np.shape(g) != a.shape:
                raise GradError(f"{name}: gradient shape {np.shape(g)} does not match input {a.shape}")
    return op


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(x)
        flat[i] = old - eps
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g
