"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
and touching at least one tensor that requires grad are recorded; everything
else runs as plain numpy and yields detached constants.  This keeps inference
free of bookkeeping while training records a flat, topologically ordered list
of nodes that :meth:`Tape.backward` replays in reverse.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "op_forward",
    "register_op",
    "backward",
    "step_quantize",
    "long_tailed_slope",
    "finite_difference_check",
    "tensor",
    "zeros",
    "concat",
    "sparse_matmul",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return op_forward("add", (self, _as_tensor(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return op_forward("sub", (self, _as_tensor(other)))

    def __rsub__(self, other):
        return op_forward("sub", (_as_tensor(other), self))

    def __mul__(self, other):
        if np.isscalar(other):
            return op_forward("scale", (self,), {"c": float(other)})
        return op_forward("hadamard", (self, _as_tensor(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return op_forward("scale", (self,), {"c": 1.0 / float(other)})
        return op_forward("div", (self, _as_tensor(other)))

    def __neg__(self):
        return op_forward("scale", (self,), {"c": -1.0})

    def __matmul__(self, other):
        return op_forward("matmul", (self, _as_tensor(other)))

    def __getitem__(self, key):
        return op_forward("slice", (self,), {"key": key})

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return op_forward("sum", (self,), {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return op_forward("mean", (self,), {"axis": axis, "keepdims": keepdims})

    def exp(self) -> "Tensor":
        return op_forward("exp", (self,))

    def log(self) -> "Tensor":
        return op_forward("log", (self,))

    def sqrt(self) -> "Tensor":
        return op_forward("sqrt", (self,))

    def square(self) -> "Tensor":
        return op_forward("square", (self,))

    def sigmoid(self) -> "Tensor":
        return op_forward("sigmoid", (self,))

    def relu(self) -> "Tensor":
        return op_forward("relu", (self,))

    def softplus(self) -> "Tensor":
        return op_forward("softplus", (self,))

    def softmax(self, axis: int = -1) -> "Tensor":
        return op_forward("softmax", (self,), {"axis": axis})

    def norm(self, axis: int = -1) -> "Tensor":
        return op_forward("norm", (self,), {"axis": axis})

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return op_forward("reshape", (self,), {"shape": shape})

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return op_forward("transpose", (self,), {"axes": axes or None})

    def broadcast_to(self, shape) -> "Tensor":
        return op_forward("broadcast", (self,), {"shape": tuple(shape)})


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(inputs), output, backward_fn))

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(root)/d(.) to every leaf that requires grad.

        Leaf gradients are accumulated into ``leaf.grad`` and also returned.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.node_id is None:
                    leaves[id(t)] = t
        if root.node_id is not None and root.node_id < len(self.nodes) and self.nodes[root.node_id].output is root:
            grads[id(root)] = np.ones_like(root.data)
            start = root.node_id
        else:
            start = -1
        for idx in range(start, -1, -1):
            node = self.nodes[idx]
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

_Forward = Callable[..., "tuple[np.ndarray, Callable]"]
_OPS: dict[str, _Forward] = {}


def register_op(kind: str):
    """Register ``fn(*arrays, **attrs) -> (out, backward)`` as op ``kind``.

    ``backward(g)`` returns one gradient (or None) per array input.
    """

    def deco(fn):
        _OPS[kind] = fn
        return fn

    return deco


_register = register_op


def op_forward(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate op ``kind`` on ``inputs`` and record it on the active tape."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    inputs = tuple(_as_tensor(t) for t in inputs)
    out_data, bwd = fn(*(t.data for t in inputs), **(attrs or {}))
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(kind, inputs, out, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


@_register("add")
def _add(a, b):
    _bshape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_register("sub")
def _sub(a, b):
    _bshape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@_register("hadamard")
def _hadamard(a, b):
    _bshape("hadamard", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_register("div")
def _div(a, b):
    _bshape("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@_register("scale")
def _scale(a, c):
    return a * c, lambda g: (g * c,)


@_register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not conform") from None
    out = a @ b

    def bwd(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, bwd


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
    return tuple(ax % ndim for ax in axes)


@_register("sum")
def _sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, bwd


@_register("mean")
def _mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.mean(axis=axes, keepdims=keepdims)
    count = a.size // max(out.size, 1) if a.size else 1

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, bwd


def _check_finite(op, a):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{op}: non-finite input")


@_register("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_register("log")
def _log(a):
    _check_finite("log", a)
    if np.any(a <= 0):
        raise ValueError("log: input must be strictly positive")
    return np.log(a), lambda g: (g / a,)


@_register("sqrt")
def _sqrt(a):
    _check_finite("sqrt", a)
    if np.any(a < 0):
        raise ValueError("sqrt: input must be non-negative")
    out = np.sqrt(a)
    return out, lambda g: (g * 0.5 / out,)


@_register("square")
def _square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _sigmoid_np(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@_register("sigmoid")
def _sigmoid(a):
    out = _sigmoid_np(a)
    return out, lambda g: (g * out * (1.0 - out),)


@_register("relu")
def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


@_register("softplus")
def _softplus(a):
    out = np.logaddexp(0.0, a)
    return out, lambda g: (g * _sigmoid_np(a),)


@_register("softmax")
def _softmax(a, axis=-1):
    _norm_axis(axis, a.ndim)
    z = np.exp(a - a.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@_register("norm")
def _norm(a, axis=-1):
    _norm_axis(axis, a.ndim)
    out = np.sqrt((a * a).sum(axis=axis))

    def bwd(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, np.expand_dims(g, axis) * a / safe, 0.0),)

    return out, bwd


@_register("slice")
def _slice(a, key):
    out = a[key]

    def bwd(g):
        full = np.zeros_like(a)
        np.add.at(full, key, g) if _is_fancy(key) else full.__setitem__(key, g)
        return (full,)

    return np.array(out, dtype=np.float64), bwd


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


@_register("broadcast")
def _broadcast(a, shape):
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


@_register("transpose")
def _transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return np.transpose(a, axes).copy(), lambda g: (np.transpose(g, inv),)


@_register("reshape")
def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@_register("concat")
def _concat(*arrays, axis=-1):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[x.shape for x in arrays]} do not conform on axis {axis}")
    out = np.concatenate(arrays, axis=ax)
    splits = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=ax))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return op_forward("concat", tensors, {"axis": axis})


@_register("sparse_matmul")
def _sparse_matmul(x, matrix):
    # matrix is a constant scipy.sparse operator; only x is differentiable
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: operator {matrix.shape} vs operand {x.shape}")
    flat = x.reshape(x.shape[0], -1)
    out = np.asarray(matrix @ flat).reshape((matrix.shape[0],) + x.shape[1:])

    def bwd(g):
        gflat = g.reshape(g.shape[0], -1)
        return (np.asarray(matrix.T @ gflat).reshape(x.shape),)

    return out, bwd


def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Apply a constant sparse linear operator to the leading axis of ``x``."""
    return op_forward("sparse_matmul", (x,), {"matrix": sp.csr_matrix(matrix)})


# ---------------------------------------------------------------------------
# Step quantizer with the long-tailed surrogate derivative
# ---------------------------------------------------------------------------


def long_tailed_slope(u: np.ndarray) -> np.ndarray:
    """Surrogate derivative of the unit step.

    2 - 4|u| on |u| <= 0.4, 0.4 on 0.4 < |u| <= 1, and 0 beyond.  The two
    pieces meet at |u| = 0.4; that point takes the constant branch so the
    value is exactly 0.4 rather than 2 - 1.6 in floating point.
    """
    au = np.abs(np.asarray(u, dtype=np.float64))
    return np.where(au < 0.4, 2.0 - 4.0 * au, np.where(au <= 1.0, 0.4, 0.0))


@_register("step_quantize")
def _step_quantize(x, threshold):
    if x.shape != threshold.shape:
        raise ShapeError(f"step_quantize: shapes {x.shape} and {threshold.shape} differ")
    u = x - threshold
    out = (u >= 0).astype(np.float64)
    slope = long_tailed_slope(u)
    return out, lambda g: (g * slope, -g * slope)


def step_quantize(x: Tensor, threshold: Tensor) -> Tensor:
    """Binary mask 1[x - threshold >= 0]; backward uses the long-tailed estimator."""
    return op_forward("step_quantize", (x, threshold))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor and must be smooth around ``x``.
    ``coords`` optionally restricts the sweep to these flat indices.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        root = f(leaf)
        grads = tape.backward(root)
    analytic = grads.get(leaf, np.zeros_like(x0))
    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size) if coords is None else coords:
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).data.sum()
        fm = f(Tensor(xm.reshape(x0.shape))).data.sum()
        num = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(num - a) / (abs(a) + 1e-8))
    return float(worst)
