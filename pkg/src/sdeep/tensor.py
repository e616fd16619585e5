"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op applied to a :class:`Tensor` appends a node to a process-wide,
monotonically numbered tape, so a node's inputs always carry smaller ids than
the node itself.  :func:`backward` walks the reachable part of that tape in
reverse id order.

Ops are also reachable by name through :func:`forward_op`, which is what the
gradient checker and the CLI use.
"""

from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "ShapeError",
    "GraphMutatedError",
    "forward_op",
    "backward",
    "OPS",
]


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shape."""


class GraphMutatedError(RuntimeError):
    """Raised when an input was modified in place between forward and backward."""


_ids = itertools.count()


@dataclass
class Node:
    id: int
    kind: str
    inputs: Tuple["Tensor", ...]
    versions: Tuple[int, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    output: "weakref.ref[Tensor]"


class Tensor:
    """n-d float64 array plus an optional gradient slot.

    ``grad`` exists iff ``requires_grad`` and always has the shape of ``data``.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._node: Optional[Node] = None
        self._version = 0

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- gradient slot management -------------------------------------------
    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def assign_(self, values: np.ndarray) -> None:
        """Overwrite data in place. Invalidates any graph that read this tensor."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign_: shape {values.shape} != {self.data.shape}")
        self.data[...] = values
        self._version += 1

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    # -- operator sugar -----------------------------------------------------
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Graph:
    """Ordered view over the nodes reachable from a set of output tensors."""

    def __init__(self, outputs: Iterable[Tensor]):
        seen: Dict[int, Node] = {}
        stack = [t for t in outputs if t._node is not None]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(inp for inp in node.inputs if inp._node is not None)
        self.nodes: List[Node] = [seen[k] for k in sorted(seen)]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.name = None
    out._version = 0
    out._node = None
    if out.requires_grad:
        out._node = Node(
            id=next(_ids),
            kind=kind,
            inputs=tuple(inputs),
            versions=tuple(t._version for t in inputs),
            backward_fn=backward_fn,
            output=weakref.ref(out),
        )
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _record(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * pos,))  # maximum keeps NaN


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (x,), grad_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x, floor: float) -> Tensor:
    x = _as_tensor(x)
    keep = x.data >= floor
    return _record("clamp_min", np.maximum(x.data, floor), (x,), lambda g: (g * keep,))


def dropout(x, mask) -> Tensor:
    """Multiply by an externally drawn keep mask, rescaled by its keep rate.

    ``mask`` holds the inverted-dropout multipliers (0 or 1/keep_prob); the
    op itself draws nothing.
    """
    x = _as_tensor(x)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"dropout: mask shape {m.shape} != input shape {x.shape}")
    return _record("dropout", x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if axes is not None and sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {x.ndim}-d input")
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def slice_(x, index) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None
    return _record("slice", np.array(out, dtype=np.float64), (x,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} disagree off axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record(
        "concat",
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is a matrix or vector and ``a`` may carry batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1:
        raise ShapeError(f"matmul: unsupported ranks {a.ndim} @ {b.ndim}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    out = a.data @ b.data
    k = b.shape[0]

    def grad_fn(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        else:
            ga = np.multiply.outer(g, b.data)
            gb = a.data.reshape(-1, k).T @ np.reshape(g, -1)
        return ga, gb

    return _record("matmul", np.asarray(out), (a, b), grad_fn)


def conv_temporal(x, weight, bias, sharing_map: Sequence[int], stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel 1-d convolution along time with a channel -> weight-bank map.

    x: (N, C, T, F_in), features last; weight: (banks, F_out, F_in, k);
    bias: (banks, F_out).  Returns (N, C, T', F_out) where channel c is
    convolved with bank ``sharing_map[c]``.  ``same`` padding needs odd k and
    gives T' = ceil(T / stride); ``valid`` gives T' = floor((T - k) / stride) + 1.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 2:
        raise ShapeError(
            f"conv_temporal: expected x 4-d, weight 4-d, bias 2-d; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    n, c, t, f_in = x.shape
    banks, f_out, w_in, k = weight.shape
    smap = np.asarray(sharing_map, dtype=np.intp)
    if smap.shape != (c,):
        raise ShapeError(f"conv_temporal: sharing map length {smap.size} != channel count {c}")
    if smap.min() < 0 or smap.max() >= banks:
        raise ShapeError(f"conv_temporal: sharing map references bank {int(smap.max())} of {banks}")
    if w_in != f_in:
        raise ShapeError(f"conv_temporal: weight expects F_in={w_in}, input has {f_in}")
    if bias.shape != (banks, f_out):
        raise ShapeError(f"conv_temporal: bias shape {bias.shape} != {(banks, f_out)}")
    if stride < 1:
        raise ShapeError("conv_temporal: stride must be >= 1")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"conv_temporal: same padding requires odd kernel, got k={k}")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
        if t < k:
            raise ShapeError(f"conv_temporal: T={t} shorter than kernel k={k} with valid padding")
    else:
        raise ValueError(f"conv_temporal: unknown padding {padding!r}")

    t_pad = t + 2 * pad
    t_out = (t_pad - k) // stride + 1
    span = stride * (t_out - 1) + 1
    xc = np.zeros((c, n, t_pad, f_in))
    xc[:, :, pad : pad + t, :] = x.data.transpose(1, 0, 2, 3)
    # im2col with (tap, feature) ordering: cols (C, N*T', k*F_in)
    cols = np.stack([xc[:, :, j : j + span : stride, :] for j in range(k)], axis=3)
    cols = cols.reshape(c, n * t_out, k * f_in)
    wc = weight.data[smap].transpose(0, 3, 2, 1).reshape(c, k * f_in, f_out)
    out = np.matmul(cols, wc) + bias.data[smap][:, None, :]
    out = out.reshape(c, n, t_out, f_out).transpose(1, 0, 2, 3)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, n * t_out, f_out)
        dwc = np.matmul(cols.transpose(0, 2, 1), g2)  # (C, k*F_in, F_out)
        dwc = dwc.reshape(c, k, f_in, f_out).transpose(0, 3, 2, 1)
        dbc = g2.sum(axis=1)
        dw = np.zeros_like(weight.data)
        db = np.zeros_like(bias.data)
        for ch in range(c):  # fixed channel order keeps accumulation deterministic
            dw[smap[ch]] += dwc[ch]
            db[smap[ch]] += dbc[ch]
        gx = None
        if x.requires_grad and stride == 1:
            # transposed convolution: correlate the padded gradient with flipped taps
            gp = np.zeros((c, n, t_out + 2 * (k - 1), f_out))
            gp[:, :, k - 1 : k - 1 + t_out, :] = g2.reshape(c, n, t_out, f_out)
            gcols = np.stack([gp[:, :, pad + j : pad + j + t, :] for j in range(k)], axis=3)
            wflip = weight.data[smap][:, :, :, ::-1].transpose(0, 3, 1, 2).reshape(c, k * f_out, f_in)
            gx = np.matmul(gcols.reshape(c, n * t, k * f_out), wflip).reshape(c, n, t, f_in).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols = np.matmul(g2, wc.transpose(0, 2, 1)).reshape(c, n, t_out, k, f_in)
            dxc = np.zeros_like(xc)
            for j in range(k):
                dxc[:, :, j : j + span : stride, :] += dcols[:, :, :, j, :]
            gx = dxc[:, :, pad : pad + t, :].transpose(1, 0, 2, 3)
        return gx, dw, db

    return _record("conv_temporal", np.ascontiguousarray(out), (x, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# dispatch and backward
# ---------------------------------------------------------------------------

OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "log": log,
    "clamp_min": clamp_min,
    "sum": sum_,
    "mean": mean,
    "dropout": dropout,
    "conv_temporal": conv_temporal,
}


def forward_op(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Apply the op named ``kind`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Leaf gradients are added to what is already in ``grad``; intermediate
    tensors receive a fresh ``grad``.  Returns the leaf -> gradient map for
    this call alone.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = Graph([loss])
    for node in graph.nodes:
        for t, v in zip(node.inputs, node.versions):
            if t._version != v:
                raise GraphMutatedError(
                    f"input of {node.kind!r} (node {node.id}) was modified in place after forward"
                )
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        out = node.output()
        g = grads.pop(id(out), None) if out is not None else None
        if g is None:
            continue
        out.grad = g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp._node is None:
                leaves[key] = inp
    result: Dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result
