"""Eager reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every executed operator in order.  Values are
computed immediately; :meth:`Tape.backward` walks the record in reverse and
:meth:`Tape.replay` re-executes it with substituted leaf values, which is
what the finite-difference checker uses.

Every operator is a pure function of its input values and a few static
attributes, so two replays of the same record are bit-identical.
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5
COS_EPS = 1e-12
GRAD_FLOOR = 1e-8


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""

    def __init__(self, op: str, shapes: Sequence[tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


# ----------------------------------------------------------------------------
# operator table


@dataclass(frozen=True)
class Operator:
    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]
    check: Callable[..., None] | None = None


OPERATORS: dict[str, Operator] = {}


def _register(name, forward, backward, check=None):
    OPERATORS[name] = Operator(name, forward, backward, check)


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


def _check_broadcast(name):
    def check(a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(name, [a.shape, b.shape], "not broadcastable") from None
    return check


# elementwise binary (numpy broadcasting rules)
_register(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    _check_broadcast("add"),
)
_register(
    "sub",
    lambda a, b: a - b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    _check_broadcast("sub"),
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    _check_broadcast("mul"),
)

# elementwise unary
_register("neg", lambda a: -a, lambda g, out, a: (-g,))
_register("scale", lambda a, c: a * c, lambda g, out, a, c: (g * c,))
_register("shift", lambda a, c: a + c, lambda g, out, a, c: (g,))
_register("square", lambda a: a * a, lambda g, out, a: (2.0 * a * g,))
_register("exp", np.exp, lambda g, out, a: (g * out,))
_register("log", np.log, lambda g, out, a: (g / a,))
_register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))


def _sigmoid(a):
    # split by sign so neither branch overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_register("sigmoid", _sigmoid, lambda g, out, a: (g * out * (1.0 - out),))


def _matmul_check(a, b):
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError("matmul", [a.shape, b.shape], "right operand needs >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    if b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError("matmul", [a.shape, b.shape], "batch dims") from None


def _matmul(a, b):
    if b.ndim == 2 and a.ndim > 2:
        # one flat GEMM instead of a loop over leading axes
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return a @ b


def _matmul_backward(g, out, a, b):
    if b.ndim == 2:
        # weight matrix shared over all leading axes
        ga = _matmul(g, b.T) if a.ndim > 1 else g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_register("matmul", _matmul, _matmul_backward, _matmul_check)


def _softmax(a, axis):
    e = a - a.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


_register(
    "softmax",
    _softmax,
    lambda g, out, a, axis: (out * (g - np.einsum("...i,...i->...", g, out)[..., None])
                             if axis in (-1, a.ndim - 1) else out * (g - (g * out).sum(axis=axis, keepdims=True)),),
)


def _layer_norm(a, eps):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def _layer_norm_backward(g, out, a, eps):
    n = a.shape[-1]
    xc = a - a.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    gm = g.mean(axis=-1, keepdims=True)
    proj = (g * out).sum(axis=-1, keepdims=True) / n
    return (inv * (g - gm - out * proj),)


_register("layer_norm", _layer_norm, _layer_norm_backward)


def _concat_check(*arrays, axis):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", [x.shape for x in arrays], f"axis={axis}")


def _concat_backward(g, out, *arrays, axis):
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


OPERATORS["concat"] = Operator(
    "concat",
    lambda *arrays, axis: np.concatenate(arrays, axis=axis),
    _concat_backward,
    _concat_check,
)


def _reduce_backward(g, a, axis, keepdims, scale):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    # read-only view; the tape never writes into gradients in place
    return (np.broadcast_to(g * scale if scale != 1.0 else g, a.shape),)


def _count(a, axis):
    if axis is None:
        return a.size
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([a.shape[i] for i in axes]))


_register(
    "mean",
    lambda a, axis, keepdims: np.asarray(a.mean(axis=axis, keepdims=keepdims)),
    lambda g, out, a, axis, keepdims: _reduce_backward(
        g, a, axis, keepdims, 1.0 / _count(a, axis)
    ),
)
_register(
    "sum",
    lambda a, axis, keepdims: np.asarray(a.sum(axis=axis, keepdims=keepdims)),
    lambda g, out, a, axis, keepdims: _reduce_backward(g, a, axis, keepdims, 1.0),
)


def _cosine(a, b, eps):
    a, b = np.broadcast_arrays(a, b)
    na = np.sqrt(np.einsum("...i,...i->...", a, a)) + eps
    nb = np.sqrt(np.einsum("...i,...i->...", b, b)) + eps
    return np.einsum("...i,...i->...", a, b) / (na * nb)


def _cosine_backward(g, out, a, b, eps):
    ra = np.sqrt(np.einsum("...i,...i->...", a, a))
    rb = np.sqrt(np.einsum("...i,...i->...", b, b))
    na, nb = ra + eps, rb + eps
    # d/da [dot / (na nb)] = b/(na nb) - dot a / (na^2 nb ra), with dot/(na nb) = out
    inv = g / (na * nb)
    ca = (g * out / (na * np.where(ra > 0, ra, 1.0)))[..., None]
    cb = (g * out / (nb * np.where(rb > 0, rb, 1.0)))[..., None]
    ga = inv[..., None] * b - ca * a
    gb = inv[..., None] * a - cb * b
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _cosine_check(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine", [a.shape, b.shape], "last axes differ")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("cosine", [a.shape, b.shape], "not broadcastable") from None


_register("cosine", _cosine, _cosine_backward, _cosine_check)


def _normalize(a, eps):
    return a / (np.sqrt(np.einsum("...i,...i->...", a, a))[..., None] + eps)


def _normalize_backward(g, out, a, eps):
    r = np.sqrt(np.einsum("...i,...i->...", a, a))[..., None]
    n = r + eps
    proj = np.einsum("...i,...i->...", a, g)[..., None] / (n * n * np.where(r > 0, r, 1.0))
    return (g / n - a * proj,)


_register("normalize", _normalize, _normalize_backward)

_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, a, shape: (g.reshape(a.shape),),
)
_register(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda g, out, a, axes: (np.transpose(g, np.argsort(axes)),),
)
_register(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda g, out, a, shape: (_unbroadcast(g, a.shape),),
)


def _slice_backward(g, out, a, axis, start, stop):
    grad = np.zeros_like(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    grad[tuple(idx)] = g
    return (grad,)


def _slice(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)].copy()


_register("slice", _slice, _slice_backward)


def _take_backward(g, out, a, indices, axis):
    if axis == 0 and a.ndim == 2 and a.shape[0] <= 256:
        # scatter-add as a one-hot GEMM; much faster than ufunc.at for short tables
        flat = indices.reshape(-1)
        onehot = (flat[None, :] == np.arange(a.shape[0])[:, None]).astype(np.float64)
        return (onehot @ g.reshape(flat.size, a.shape[1]),)
    grad = np.zeros_like(a)
    if axis == 0:
        np.add.at(grad, indices, g)
    else:
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
    return (grad,)


_register(
    "take",
    lambda a, indices, axis: np.take(a, indices, axis=axis),
    _take_backward,
)


def _take_along_backward(g, out, a, indices, axis):
    grad = np.zeros_like(a)
    np.put_along_axis(grad, indices, g, axis=axis)
    return (grad,)


_register(
    "take_along",
    lambda a, indices, axis: np.take_along_axis(a, indices, axis=axis),
    _take_along_backward,
)


# ----------------------------------------------------------------------------
# record


class Node:
    """A value produced on a tape.

    Supports ``+ - * @`` and unary minus; everything else goes through the
    module-level functions.
    """

    __slots__ = ("_tape", "id", "value", "op", "inputs", "attrs", "trainable", "name", "needs_grad")

    def __init__(self, tape, id, value, op, inputs, attrs, trainable, name, needs_grad):
        # weak, so a dropped tape and its arrays are freed at once rather than by the cycle collector
        self._tape = weakref.ref(tape)
        self.id = id
        self.value = value
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.trainable = trainable
        self.name = name
        self.needs_grad = needs_grad

    @property
    def tape(self) -> Tape:
        tape = self._tape()
        if tape is None:
            raise RuntimeError(f"node {self.id} outlived its tape")
        return tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        if np.isscalar(other):
            return self.tape.forward("shift", self, c=float(other))
        return self.tape.forward("add", self, self._lift(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if np.isscalar(other):
            return self.tape.forward("shift", self, c=-float(other))
        return self.tape.forward("sub", self, self._lift(other))

    def __rsub__(self, other):
        if np.isscalar(other):
            return self.tape.forward("shift", self.tape.forward("neg", self), c=float(other))
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.forward("scale", self, c=float(other))
        return self.tape.forward("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return self.tape.forward("scale", self, c=1.0 / float(other))

    def __neg__(self):
        return self.tape.forward("neg", self)

    def __matmul__(self, other):
        return self.tape.forward("matmul", self, self._lift(other))

    def __repr__(self):
        kind = self.op or ("param" if self.trainable else "const")
        return f"Node(id={self.id}, {kind}, shape={self.shape})"


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass
class Tape:
    """Ordered record of executed operators (the computation record)."""

    nodes: list[Node] = field(default_factory=list)

    def _append(self, value, op, inputs, attrs, trainable, name, needs_grad) -> Node:
        node = Node(self, len(self.nodes), value, op, inputs, attrs, trainable, name, needs_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, trainable: bool = True, name: str | None = None) -> Node:
        return self._append(_frozen(value), None, (), {}, trainable, name, trainable)

    def const(self, value, name: str | None = None) -> Node:
        return self.leaf(value, trainable=False, name=name)

    def forward(self, op: str, *inputs: Node, **attrs) -> Node:
        try:
            op_def = OPERATORS[op]
        except KeyError:
            raise ValueError(f"unknown operator {op!r}") from None
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input node {x.id} belongs to another tape")
        values = [x.value for x in inputs]
        if op_def.check is not None:
            if op == "concat":
                op_def.check(*values, **attrs)
            else:
                op_def.check(*values)
        try:
            out = op_def.forward(*values, **attrs)
        except ValueError as err:
            raise ShapeError(op, [v.shape for v in values], str(err)) from None
        out = np.asarray(out, dtype=np.float64)
        out.flags.writeable = False
        needs = any(x.needs_grad for x in inputs)
        return self._append(out, op, tuple(x.id for x in inputs), attrs, False, None, needs)

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.is_leaf and n.trainable]

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every trainable leaf."""
        if loss.value.size != 1:
            raise ShapeError("backward", [loss.shape], "loss must be scalar")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or node.is_leaf or not node.needs_grad:
                continue
            inputs = [self.nodes[i] for i in node.inputs]
            parts = OPERATORS[node.op].backward(
                g, node.value, *[x.value for x in inputs], **node.attrs
            )
            for x, part in zip(inputs, parts):
                if not x.needs_grad:
                    continue
                if x.id in grads:
                    grads[x.id] = grads[x.id] + part
                else:
                    grads[x.id] = part
            if node.id != loss.id:
                del grads[node.id]
        return {
            n.id: np.array(grads.get(n.id, np.zeros_like(n.value)), dtype=np.float64).reshape(n.shape)
            for n in self.leaves
        }

    def replay(self, overrides: dict[int, np.ndarray] | None = None, upto: int | None = None) -> list[np.ndarray]:
        """Re-execute the record, optionally substituting leaf values."""
        overrides = overrides or {}
        stop = len(self.nodes) if upto is None else upto + 1
        values: list[np.ndarray] = []
        for node in self.nodes[:stop]:
            if node.is_leaf:
                values.append(np.asarray(overrides.get(node.id, node.value), dtype=np.float64))
            else:
                op_def = OPERATORS[node.op]
                args = [values[i] for i in node.inputs]
                values.append(np.asarray(op_def.forward(*args, **node.attrs), dtype=np.float64))
        return values


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def grad_check(
    tape: Tape,
    loss: Node,
    leaf: Node,
    perturbation: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backward() and a central difference.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.  With
    ``max_elements`` set, a seeded random subset of the leaf is checked.
    A non-finite forward value under perturbation returns ``inf``.
    """
    if not 0.0 < perturbation <= 1e-3:
        raise ValueError(f"perturbation must lie in (0, 1e-3], got {perturbation}")
    if not leaf.is_leaf:
        raise ValueError("grad_check needs a leaf node")
    analytic = tape.backward(loss).get(leaf.id)
    if analytic is None:
        analytic = np.zeros_like(leaf.value)
    base = np.array(leaf.value, dtype=np.float64)
    flat_idx = np.arange(base.size)
    if max_elements is not None and max_elements < base.size:
        rng = np.random.default_rng(seed)
        flat_idx = np.sort(rng.choice(base.size, size=max_elements, replace=False))
    worst = 0.0
    for i in flat_idx:
        vals = []
        for sign in (1.0, -1.0):
            trial = base.copy().reshape(-1)
            trial[i] += sign * perturbation
            out = tape.replay({leaf.id: trial.reshape(base.shape)}, upto=loss.id)[loss.id]
            if not np.all(np.isfinite(out)):
                return math.inf
            vals.append(float(out.reshape(-1)[0]))
        numeric = (vals[0] - vals[1]) / (2.0 * perturbation)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_FLOOR)
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# functional surface


def add(a: Node, b: Node) -> Node:
    return a.tape.forward("add", a, b)


def sub(a: Node, b: Node) -> Node:
    return a.tape.forward("sub", a, b)


def mul(a: Node, b: Node) -> Node:
    return a.tape.forward("mul", a, b)


def matmul(a: Node, b: Node) -> Node:
    return a.tape.forward("matmul", a, b)


def scale(a: Node, c: float) -> Node:
    return a.tape.forward("scale", a, c=float(c))


def sigmoid(a: Node) -> Node:
    return a.tape.forward("sigmoid", a)


def relu(a: Node) -> Node:
    return a.tape.forward("relu", a)


def exp(a: Node) -> Node:
    return a.tape.forward("exp", a)


def log(a: Node) -> Node:
    return a.tape.forward("log", a)


def square(a: Node) -> Node:
    return a.tape.forward("square", a)


def softmax(a: Node, axis: int = -1) -> Node:
    return a.tape.forward("softmax", a, axis=axis)


def layer_norm(a: Node, eps: float = LN_EPS) -> Node:
    return a.tape.forward("layer_norm", a, eps=eps)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    return nodes[0].tape.forward("concat", *nodes, axis=axis)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    return a.tape.forward("mean", a, axis=axis, keepdims=keepdims)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    return a.tape.forward("sum", a, axis=axis, keepdims=keepdims)


def cosine(a: Node, b: Node, eps: float = COS_EPS) -> Node:
    """Cosine similarity along the last axis."""
    return a.tape.forward("cosine", a, b, eps=eps)


def normalize(a: Node, eps: float = COS_EPS) -> Node:
    """Rows scaled to unit length along the last axis, ``a / (|a| + eps)``."""
    return a.tape.forward("normalize", a, eps=eps)


def reshape(a: Node, shape) -> Node:
    return a.tape.forward("reshape", a, shape=tuple(shape))


def transpose(a: Node, axes) -> Node:
    return a.tape.forward("transpose", a, axes=tuple(axes))


def broadcast_to(a: Node, shape) -> Node:
    return a.tape.forward("broadcast_to", a, shape=tuple(shape))


def slice_(a: Node, axis: int, start: int, stop: int) -> Node:
    return a.tape.forward("slice", a, axis=axis % a.value.ndim, start=start, stop=stop)


def take(a: Node, indices, axis: int = 0) -> Node:
    return a.tape.forward("take", a, indices=np.asarray(indices), axis=axis)


def take_along(a: Node, indices, axis: int = -1) -> Node:
    return a.tape.forward("take_along", a, indices=np.asarray(indices), axis=axis)
