"""A small taped reverse-mode autodiff engine over float64 numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the output gradient back
onto its inputs.  ``Tensor.backward`` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import json
import os
import warnings
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CheckpointError,
    NonFiniteError,
    NonScalarLoss,
    ReceptiveFieldWarning,
    ShapeError,
)

_GRAD_ENABLED = True
CHECKPOINT_VERSION = 1


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

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
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise NonScalarLoss(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in forward pass")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def _pair(sa: str, a: np.ndarray, sb: str, b: np.ndarray, keep: str) -> tuple[str, np.ndarray]:
    """Contract two operands, keeping the indices listed in ``keep``, via a
    single batched matmul."""
    only_a = [c for c in sa if c not in sb and c not in keep]
    only_b = [c for c in sb if c not in sa and c not in keep]
    if only_a:
        a = a.sum(axis=tuple(sa.index(c) for c in only_a))
        sa = "".join(c for c in sa if c not in only_a)
    if only_b:
        b = b.sum(axis=tuple(sb.index(c) for c in only_b))
        sb = "".join(c for c in sb if c not in only_b)
    batch = [c for c in sa if c in sb and c in keep]
    contract = [c for c in sa if c in sb and c not in keep]
    left = [c for c in sa if c not in sb]
    right = [c for c in sb if c not in sa]
    size = {c: n for c, n in zip(sa, a.shape)}
    size.update({c: n for c, n in zip(sb, b.shape)})
    at = a.transpose([sa.index(c) for c in batch + left + contract])
    bt = b.transpose([sb.index(c) for c in batch + contract + right])
    nb = [size[c] for c in batch]
    nl = int(np.prod([size[c] for c in left], dtype=int))
    nc = int(np.prod([size[c] for c in contract], dtype=int))
    nr = int(np.prod([size[c] for c in right], dtype=int))
    out = np.matmul(at.reshape(nb + [nl, nc]), bt.reshape(nb + [nc, nr]))
    out = out.reshape(nb + [size[c] for c in left] + [size[c] for c in right])
    return "".join(batch + left + right), out


def _einsum_np(subscripts: str, *arrays: np.ndarray) -> np.ndarray:
    lhs, out_sub = subscripts.split("->")
    subs = lhs.split(",")
    if len(arrays) == 1:
        return np.einsum(subscripts, arrays[0])
    cur_s, cur = subs[0], arrays[0]
    for k in range(1, len(arrays)):
        later = out_sub + "".join(subs[k + 1:])
        keep = "".join(c for c in dict.fromkeys(cur_s + subs[k]) if c in later)
        cur_s, cur = _pair(cur_s, cur, subs[k], arrays[k], keep)
    extra = tuple(i for i, c in enumerate(cur_s) if c not in out_sub)
    if extra:
        cur = cur.sum(axis=extra)
        cur_s = "".join(c for c in cur_s if c in out_sub)
    return np.ascontiguousarray(cur.transpose([cur_s.index(c) for c in out_sub]))


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) without ellipsis or repeated
    indices inside a single operand."""
    ops = [as_tensor(o) for o in operands]
    if "->" not in subscripts or "." in subscripts:
        raise ValueError("einsum needs explicit '->' output and no ellipsis")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError("einsum: operand count does not match subscripts")
    sizes = {}
    for sub_, op in zip(in_subs, ops):
        if len(sub_) != op.ndim or len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum: subscripts {sub_!r} do not fit operand of shape {op.shape}")
        for ch, n in zip(sub_, op.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(
                    f"einsum {subscripts!r}: index {ch!r} has sizes {sizes[ch]} and {n} "
                    f"(shapes {[o.shape for o in ops]})"
                )
    subscripts = lhs + "->" + out_sub
    out = _einsum_np(subscripts, *(o.data for o in ops))

    def backward(g):
        grads = []
        for k, (sub_k, op) in enumerate(zip(in_subs, ops)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [(s, o.data) for j, (s, o) in enumerate(zip(in_subs, ops)) if j != k]
            available = set(out_sub).union(*(set(s) for s, _ in others))
            target = "".join(ch for ch in sub_k if ch in available)
            expr = ",".join([out_sub] + [s for s, _ in others]) + "->" + target
            gk = _einsum_np(expr, g, *(d for _, d in others))
            if target != sub_k:
                expand = tuple(i for i, ch in enumerate(sub_k) if ch not in available)
                gk = np.broadcast_to(np.expand_dims(gk, expand), op.shape).copy()
            grads.append(gk)
        return grads

    return _result(out, ops, backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _result(out, tensors, backward)


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward)


# reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


# nonlinearities

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward)


def huber(e: Tensor, delta: float) -> Tensor:
    """Elementwise Huber function of a residual tensor."""
    x = e.data
    small = np.abs(x) <= delta
    out = np.where(small, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))

    def backward(g):
        return (g * np.where(small, x, delta * np.sign(x)),)

    return _result(out, (e,), backward)


# temporal convolution

def _shift_right(x: np.ndarray, s: int) -> np.ndarray:
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[-1]:
        out[..., s:] = x[..., :-s]
    return out


def _shift_left(x: np.ndarray, s: int) -> np.ndarray:
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[-1]:
        out[..., :-s] = x[..., s:]
    return out


def conv1d_causal(x: Tensor, filters: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal convolution over the last (time) axis.

    ``x`` is ``[..., F, P]`` and ``filters`` is ``[B, F, F']``; tap ``b``
    reads ``t - dilation * b`` with zeros before the window start.
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if filters.ndim != 3 or x.ndim < 2 or filters.shape[1] != x.shape[-2]:
        raise ShapeError(f"conv1d_causal: input {x.shape} does not fit filters {filters.shape}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    taps = filters.shape[0]
    P = x.shape[-1]
    if dilation * (taps - 1) >= P:
        warnings.warn(
            f"receptive field {dilation * (taps - 1) + 1} exceeds window {P}",
            ReceptiveFieldWarning,
            stacklevel=2,
        )
    shifted = [_shift_right(x.data, dilation * b) for b in range(taps)]
    out = sum(
        np.swapaxes(np.swapaxes(s, -1, -2) @ filters.data[b], -1, -2)
        for b, s in enumerate(shifted)
    )

    def backward(g):
        gT = np.swapaxes(g, -1, -2)
        gx = None
        if x.requires_grad:
            gx = sum(
                _shift_left(np.swapaxes(gT @ filters.data[b].T, -1, -2), dilation * b)
                for b in range(taps)
            )
        gw = None
        if filters.requires_grad:
            gw = np.stack(
                [
                    np.tensordot(s, g, axes=(list(range(g.ndim - 2)) + [g.ndim - 1],) * 2)
                    for s in shifted
                ]
            )
        return gx, gw

    return _result(out, (x, filters), backward)


# gradient utilities

def numerical_gradient(fn: Callable[[], float], param: Tensor, index: tuple, step: float = 1e-5) -> float:
    """Central finite difference of ``fn`` with respect to one coordinate."""
    original = param.data[index]
    param.data[index] = original + step
    up = fn()
    param.data[index] = original - step
    down = fn()
    param.data[index] = original
    return (up - down) / (2.0 * step)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


# checkpoints

def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Text checkpoint: a version line, one JSON metadata line, then one
    ``name<TAB>shape<TAB>hex floats`` line per parameter (bit exact)."""
    lines = [f"evolvecast-checkpoint v{CHECKPOINT_VERSION}", json.dumps(meta or {}, sort_keys=True)]
    for name in sorted(params):
        arr = np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name], dtype=np.float64)
        shape = "x".join(str(n) for n in arr.shape) or "scalar"
        values = " ".join(float(v).hex() for v in arr.ravel())
        lines.append(f"{name}\t{shape}\t{values}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    if not os.path.exists(path):
        raise CheckpointError(f"{path}: no such checkpoint")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("evolvecast-checkpoint v"):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(lines[1])
    params = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        try:
            name, shape, values = line.split("\t")
            dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
            flat = [float.fromhex(v) for v in values.split()] if values else []
            params[name] = np.array(flat, dtype=np.float64).reshape(dims)
        except ValueError as exc:
            raise CheckpointError(f"{path}:{lineno}: {exc}") from None
    return meta, params


__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "hadamard",
    "scale",
    "matmul",
    "einsum",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "sum_",
    "mean",
    "relu",
    "sigmoid",
    "softmax",
    "huber",
    "conv1d_causal",
    "numerical_gradient",
    "relative_error",
    "save_checkpoint",
    "load_checkpoint",
]
