"""Reverse-mode automatic differentiation with gradient-of-gradient support.

Each differentiable operation records its inputs and a vector-Jacobian
product written in terms of other differentiable operations.  Running
:func:`grad` with ``create_graph=True`` therefore records the backward pass
itself, and a second :func:`grad` over its result differentiates through
the first one (double backpropagation).

The tape is implicit: every recorded node gets a monotonically increasing
id at creation, so inputs always have smaller ids than their consumers and
sorting by descending id is a reverse topological order.  Gradient
accumulation follows that order, which keeps results bit-reproducible.
"""

from __future__ import annotations

import builtins
import contextlib
import itertools
import threading

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, UnsupportedOpError
from .tensor import Tensor

_ids = itertools.count()
_state = threading.local()


def is_recording():
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def set_recording(flag):
    prev = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    return set_recording(False)


class Node:
    """A tensor value bound into the computation graph."""

    __slots__ = ("value", "requires_grad", "parents", "vjp", "op", "second_order", "id", "__weakref__")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, op=None, second_order=True):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.second_order = second_order
        self.id = next(_ids)

    @property
    def is_leaf(self):
        return not self.parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self):
        return self.value.numpy()

    def item(self):
        return self.value.item()

    def detach(self):
        return Node(self.value)

    def __repr__(self):
        kind = "leaf" if self.is_leaf else self.op
        return f"Node({kind}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def lift(t, requires_grad=False):
    """Wrap a tensor as a leaf node."""
    if isinstance(t, Node):
        t = t.value
    return Node(t if isinstance(t, Tensor) else Tensor(t), requires_grad=requires_grad)


def constant(t):
    return lift(t, requires_grad=False)


def _make(value, parents, vjp, op, second_order=True):
    if is_recording() and any(p.requires_grad for p in parents):
        return Node(value, True, tuple(parents), vjp, op, second_order)
    return Node(value)


def custom_op(name, forward, backward):
    """Build a first-order-only op from numpy callables.

    ``forward(*arrays) -> array`` and ``backward(g, *arrays) -> tuple of arrays``.
    The resulting op differentiates once; asking for ``create_graph`` through
    it raises :class:`UnsupportedOpError`.
    """

    def op(*nodes):
        arrays = [n.value.data for n in nodes]
        out = Tensor._wrap(np.asarray(forward(*arrays)))

        def vjp(g, needs):
            grads = backward(g.value.data, *arrays)
            return tuple(constant(Tensor._wrap(np.asarray(gr))) if need else None for gr, need in zip(grads, needs))

        return _make(out, nodes, vjp, name, second_order=False)

    op.__name__ = name
    return op


# --- differentiable operations ---------------------------------------------

def add(a, b):
    if not isinstance(b, Node):
        return _make(T.elementwise("add", a.value, b), (a,), lambda g, needs: (g,), "add_scalar")
    return _make(T.elementwise("add", a.value, b.value), (a, b), lambda g, needs: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Node):
        return add(a, -b)
    return _make(
        T.elementwise("sub", a.value, b.value), (a, b),
        lambda g, needs: (g, scale(g, -1.0) if needs[1] else None), "sub",
    )


def mul(a, b):
    def vjp(g, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return _make(T.elementwise("mul", a.value, b.value), (a, b), vjp, "mul")


def scale(a, c):
    c = float(c)
    return _make(T.elementwise("scale", a.value, c), (a,), lambda g, needs: (scale(g, c),), "scale")


def matmul(a, b):
    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make(T.matmul(a.value, b.value), (a, b), vjp, "matmul")


def transpose(a):
    return _make(T.transpose(a.value), (a,), lambda g, needs: (transpose(g),), "transpose")


def reshape(a, shape):
    src = a.shape
    return _make(T.reshape(a.value, shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def relu(a):
    def vjp(g, needs):
        return (mul(g, constant(T.elementwise("step", a.value))),)

    return _make(T.elementwise("relu", a.value), (a,), vjp, "relu")


def sigmoid(a):
    def vjp(g, needs):
        return (mul(g, mul(out, add(scale(out, -1.0), 1.0))),)

    out = _make(T.elementwise("sigmoid", a.value), (a,), vjp, "sigmoid")
    return out


def softplus(a):
    return _make(T.elementwise("softplus", a.value), (a,), lambda g, needs: (mul(g, sigmoid(a)),), "softplus")


def abs(a):  # noqa: A001 - mirrors the kernel name
    def vjp(g, needs):
        # sign(0) = 0 keeps the subgradient defined at the kink
        return (mul(g, constant(T.elementwise("sign", a.value))),)

    return _make(T.elementwise("abs", a.value), (a,), vjp, "abs")


def reciprocal(a):
    def vjp(g, needs):
        return (scale(mul(g, mul(out, out)), -1.0),)

    out = _make(T.elementwise("reciprocal", a.value), (a,), vjp, "reciprocal")
    return out


def sqrt_eps(a):
    """sqrt(a + 1e-12), smooth at zero."""

    def vjp(g, needs):
        return (scale(mul(g, reciprocal(out)), 0.5),)

    out = _make(T.elementwise("sqrt_eps", a.value), (a,), vjp, "sqrt_eps")
    return out


def fill(s, shape):
    """Broadcast a scalar node to ``shape``."""
    shape = tuple(shape)
    return _make(T.broadcast_scalar(s.value, shape), (s,), lambda g, needs: (reshape(sum(g), s.shape),), "fill")


def sum(a):  # noqa: A001
    shape = a.shape
    return _make(T.reduce("sum", a.value), (a,), lambda g, needs: (fill(g, shape),), "sum")


def mean(a):
    shape, n = a.shape, a.value.size
    val = T.reduce("mean", a.value)
    return _make(val, (a,), lambda g, needs: (fill(scale(g, 1.0 / n), shape),), "mean")


def gather(a, idx, op="gather"):
    """Values of ``a`` at flat positions ``idx``; result has ``idx``'s shape."""
    src = a.shape
    idx = np.asarray(idx)
    return _make(T.gather(a.value, idx), (a,), lambda g, needs: (scatter(g, idx, src),), op)


def scatter(g, idx, shape):
    """Adjoint of :func:`gather`: accumulate ``g`` into zeros of ``shape``."""
    return _make(T.scatter_add(g.value, idx, shape), (g,), lambda gg, needs: (gather(gg, idx),), "scatter")


def take(a, i):
    """Scalar element ``i`` of a rank-1 node."""
    if a.value.rank != 1:
        raise ShapeError(f"take needs a rank-1 node, got {a.shape}")
    return gather(a, np.asarray(i, dtype=np.intp), op="take")


def maxpool2d(x, k=2, stride=2):
    # The winner routing is fixed at forward time and treated as constant
    # under further differentiation.
    _, idx = T.maxpool2d(x.value, k, stride)
    return gather(x, idx, op="maxpool2d")


def channel_sum(a):
    h, w = a.shape[1:]
    return _make(T.channel_sum(a.value), (a,), lambda g, needs: (channel_broadcast(g, h, w),), "channel_sum")


def channel_broadcast(v, h, w):
    return _make(T.channel_broadcast(v.value, h, w), (v,), lambda g, needs: (channel_sum(g),), "channel_broadcast")


def conv2d(x, w, b=None, stride=1, pad=0):
    def vjp(g, needs):
        return (
            conv2d_input_grad(g, w, x.shape, stride, pad) if needs[0] else None,
            conv2d_weight_grad(x, g, w.shape, stride, pad) if needs[1] else None,
        ) + ((channel_sum(g) if needs[2] else None,) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    value = T.conv2d(x.value, w.value, None if b is None else b.value, stride, pad)
    return _make(value, parents, vjp, "conv2d")


def conv2d_input_grad(g, w, x_shape, stride=1, pad=0):
    # <u, Xt(g, w)> = <g, conv(u, w)>
    def vjp(u, needs):
        return (
            conv2d(u, w, None, stride, pad) if needs[0] else None,
            conv2d_weight_grad(u, g, w.shape, stride, pad) if needs[1] else None,
        )

    value = T.conv2d_input_grad(g.value, w.value, x_shape, stride, pad)
    return _make(value, (g, w), vjp, "conv2d_input_grad")


def conv2d_weight_grad(x, g, w_shape, stride=1, pad=0):
    # <v, Wt(x, g)> = <g, conv(x, v)>
    def vjp(v, needs):
        return (
            conv2d_input_grad(g, v, x.shape, stride, pad) if needs[0] else None,
            conv2d(x, v, None, stride, pad) if needs[1] else None,
        )

    value = T.conv2d_weight_grad(x.value, g.value, w_shape, stride, pad)
    return _make(value, (x, g), vjp, "conv2d_weight_grad")


# --- gradient driver --------------------------------------------------------

def _relevant_nodes(output, targets):
    """Nodes lying on some path from a target up to ``output``, descending id."""
    order = []
    seen = set()
    stack = [(output, False)]
    relevant = {}
    while stack:
        node, expanded = stack.pop()
        if expanded:
            hit = node.id in targets or any(relevant.get(p.id, False) for p in node.parents)
            relevant[node.id] = hit
            if hit:
                order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    order.sort(key=lambda n: n.id, reverse=True)
    return order, relevant


def grad(output, wrt, create_graph=False):
    """Gradients of the scalar ``output`` with respect to each node in ``wrt``.

    Nodes that do not influence ``output`` get a zero tensor.  With
    ``create_graph`` the returned nodes are themselves differentiable;
    otherwise they are constant leaves.
    """
    if output.value.rank != 0:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    targets = {w.id for w in wrt}
    grads = {}
    if output.requires_grad or output.id in targets:
        order, relevant = _relevant_nodes(output, targets)
        if create_graph:
            for node in order:
                if not node.second_order:
                    raise UnsupportedOpError(node.op)
        grads[output.id] = constant(T.ones((), output.dtype))
        with set_recording(create_graph):
            for node in order:
                g = grads.get(node.id)
                if g is None or not node.parents:
                    continue
                needs = tuple(relevant.get(p.id, False) for p in node.parents)
                for p, gp, need in zip(node.parents, node.vjp(g, needs), needs):
                    if not need or gp is None:
                        continue
                    prev = grads.get(p.id)
                    grads[p.id] = gp if prev is None else add(prev, gp)
    out = []
    for w in wrt:
        g = grads.get(w.id)
        if g is None:
            g = constant(T.zeros(w.shape, w.dtype))
        elif not create_graph and not g.is_leaf:
            g = g.detach()
        out.append(g)
    return out


def backward_numeric(output, wrt):
    """Convenience: first-order gradients as numpy arrays."""
    return [g.value.numpy() for g in grad(output, wrt, create_graph=False)]


# --- parameter checkpointing -----------------------------------------------

def checkpoint_params(nodes):
    """Flatten parameter leaves, in the given order, into one rank-1 tensor."""
    nodes = list(nodes)
    if not nodes:
        return T.zeros((0,))
    dtype = nodes[0].dtype
    return Tensor._wrap(np.concatenate([n.value.data.reshape(-1).astype(dtype, copy=False) for n in nodes]))


def restore_params(nodes, flat):
    """Write a :func:`checkpoint_params` vector back into ``nodes`` in place."""
    nodes = list(nodes)
    total = builtins.sum(n.value.size for n in nodes)
    if flat.rank != 1 or flat.size != total:
        raise ShapeError(f"checkpoint holds {flat.size} values, parameters need {total}")
    pos = 0
    data = flat.data
    for n in nodes:
        k = n.value.size
        n.value = Tensor._wrap(data[pos:pos + k].reshape(n.shape).astype(n.dtype))
        pos += k
