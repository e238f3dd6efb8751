"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves on the active :class:`Tape` only when one is
open and at least one input requires a gradient. Outside a tape every op is
a plain numpy evaluation, which keeps inference pure and cheap.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    pass


class DegenerateSliceError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data.astype(np.float64, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        tape = _active_tape()
        if tape is None:
            raise ContractError("backward() needs the tape that recorded this tensor; call tape.backward(root)")
        tape.backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block that touch
    a tensor with ``requires_grad`` are appended in execution order, which is
    a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable) -> None:
        out.node_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(op, inputs, out, backward_fn))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if root.size != 1:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
        if root.node_id is None or root.node_id >= len(self.nodes) or self.nodes[root.node_id].output is not root:
            raise ContractError("backward root was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes[: root.node_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t.node_id is not None and t.node_id < len(self.nodes) and self.nodes[t.node_id].output is t:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _record("gelu", (x,), out, backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", (x,), out, backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


mean_pool = mean


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _record("concat", tuple(tensors), out, backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.intp)
    src = x.shape

    def backward(g):
        gx = np.zeros(src)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("take_rows", (x,), x.data[index], backward)


def scatter_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at ``index`` inside a zero tensor of ``n_rows`` rows."""
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n_rows,) + x.shape[1:])
    out[index] = x.data
    return _record("scatter_rows", (x,), out, lambda g: (g[index],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record("matmul", (a, b), out, backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# normalisation / attention primitives


def masked_softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` where ``mask`` False entries are forced to exactly 0."""
    xd = x.data
    if mask is None:
        m = np.ones(xd.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    if not m.any(axis=axis).all():
        raise DegenerateSliceError("masked_softmax: a slice has every entry masked")
    shifted = np.where(m, xd, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("masked_softmax", (x,), p, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs trailing dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # x [N, C, H, W] -> [N, Ho, Wo, C*k*k]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, k, k]``.
    """
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected image [C,H,W] or [N,C,H,W] and kernel [O,C,k,k], got {x.shape}, {w.shape}")
    n, c, h, wdt = xd.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if k > h or k > wdt:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than input {h}x{wdt}")
    ho, wo = (h - k) // stride + 1, (wdt - k) // stride + 1
    cols = _im2col(xd, k, stride)  # [N, Ho, Wo, C*k*k]
    wmat = w.data.reshape(co, -1)  # [O, C*k*k]
    out = cols.reshape(-1, c * k * k) @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, co)  # [N*Ho*Wo, O]
        gw = (gmat.T @ cols.reshape(-1, c * k * k)).reshape(w.shape)
        gb = gmat.sum(axis=0) if b is not None else None
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if single:
            gx = gx[0]
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# loss


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def bce_with_logits(logit: Tensor, label: int) -> Tensor:
    """Binary cross-entropy on a scalar logit, ``max(z,0) - z*y + log1p(exp(-|z|))``."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    z = logit.data
    loss = np.maximum(z, 0.0) - z * label + np.log1p(np.exp(-np.abs(z)))
    s = sigmoid(z)
    return _record("bce_with_logits", (logit,), loss, lambda g: (g * (s - label),))
