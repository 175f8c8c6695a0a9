"""Reverse-mode automatic differentiation over dense float64 arrays.

The expression language is deliberately small: just enough matrix and
elementwise operations to assemble Gaussian log-densities, KL terms, small
MLPs, masked-graph penalties and straight-through estimators. Expressions
are immutable DAGs of Expr nodes; values are bound to named parameter
leaves at call time, so a graph can be built once and evaluated many times
with different inputs. Per-call state lives in local dicts, which makes
concurrent evaluation of a shared graph safe.

`finite_difference_check` is the built-in self-test: it compares reverse-mode
gradients against central differences coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

LEAKY_SLOPE = 0.01  # negative-side slope; also the subgradient at the kink


class AutodiffError(Exception):
    """Raised when an expression cannot be evaluated or differentiated."""


class UnboundParameterError(AutodiffError):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Expr:
    """One node of an expression DAG, immutable once built."""

    __slots__ = ("kind", "children", "shape", "aux", "name", "_topo")

    def __init__(self, kind, children=(), shape=(), aux=None, name=None):
        self.kind = kind
        self.children = tuple(children)
        self.shape = tuple(int(s) for s in shape)
        self.aux = aux
        self.name = name
        self._topo = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Expr {self.kind}{tag} shape={self.shape}>"

    # arithmetic sugar so graph-building code reads like numpy
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __matmul__(self, other):
        return matmul(self, as_expr(other))

    def __neg__(self):
        return mul(self, constant(-1.0))


def as_expr(value):
    """Wrap a number or ndarray as a constant node; pass Exprs through."""
    if isinstance(value, Expr):
        return value
    return constant(value)


# ---------------------------------------------------------------------------
# node constructors (shape checked at build time)


def parameter(name, shape):
    if not name:
        raise ValueError("parameter needs a non-empty name")
    return Expr("parameter", (), tuple(shape), name=name)


def constant(value):
    arr = np.asarray(value, dtype=np.float64)
    return Expr("constant", (), arr.shape, aux=arr)


def _elementwise(kind, x):
    return Expr(kind, (x,), x.shape)


def square(x):
    return _elementwise("square", x)


def exp(x):
    return _elementwise("exp", x)


def log(x):
    return _elementwise("log", x)


def sigmoid(x):
    return _elementwise("sigmoid", x)


def leakyrelu(x):
    return _elementwise("leakyrelu", x)


def stop_gradient(x):
    """Pass the value through unchanged; contribute zero gradient."""
    return _elementwise("stop_gradient", x)


def _broadcast_binary(kind, a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{kind}: cannot broadcast {a.shape} with {b.shape}")
    return Expr(kind, (a, b), shape)


def add(a, b):
    return _broadcast_binary("add", a, b)


def sub(a, b):
    return _broadcast_binary("sub", a, b)


def mul(a, b):
    return _broadcast_binary("mul", a, b)


def matmul(a, b):
    if len(a.shape) < 2 or len(b.shape) < 2:
        raise ShapeMismatchError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch dims {a.shape} @ {b.shape}")
    return Expr("matmul", (a, b), batch + (a.shape[-2], b.shape[-1]))


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = tuple(sorted(a % ndim for a in axis))
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes {axis}")
    return out


def _reduce(kind, x, axis, keepdims):
    axes = _normalize_axis(axis, len(x.shape))
    shape = tuple(
        (1 if i in axes else s) for i, s in enumerate(x.shape) if keepdims or i not in axes
    )
    return Expr(kind, (x,), shape, aux=(axes, keepdims))


def sum_(x, axis=None, keepdims=False):
    return _reduce("sum", x, axis, keepdims)


def mean_(x, axis=None, keepdims=False):
    return _reduce("mean", x, axis, keepdims)


def concat(parts, axis):
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of nothing")
    ndim = len(parts[0].shape)
    axis = axis % ndim
    for p in parts[1:]:
        if len(p.shape) != ndim:
            raise ShapeMismatchError("concat: rank mismatch")
        for i in range(ndim):
            if i != axis and p.shape[i] != parts[0].shape[i]:
                raise ShapeMismatchError(f"concat: {p.shape} vs {parts[0].shape}")
    shape = list(parts[0].shape)
    shape[axis] = sum(p.shape[axis] for p in parts)
    return Expr("concat", parts, shape, aux=axis)


def slice_(x, key):
    """Basic indexing with a tuple of ints and slices."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice)):
            raise ValueError("slice_ supports ints and slices only")
    shape = np.broadcast_to(0.0, x.shape)[key].shape
    return Expr("slice", (x,), shape, aux=key)


def broadcast_to(x, shape):
    shape = tuple(int(s) for s in shape)
    if np.broadcast_shapes(x.shape, shape) != shape:
        raise ShapeMismatchError(f"cannot broadcast {x.shape} to {shape}")
    return Expr("broadcast", (x,), shape)


def embed_lookup(table, indices):
    """Gather rows of a 2-d table by a fixed integer index vector."""
    if len(table.shape) != 2:
        raise ShapeMismatchError("embed_lookup expects a 2-d table")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError("embed_lookup expects a 1-d index vector")
    return Expr("embed_lookup", (table,), (idx.shape[0], table.shape[1]), aux=idx)


def transpose(x, axes=None):
    ndim = len(x.shape)
    if axes is None:
        axes = tuple(reversed(range(ndim)))
    axes = tuple(a % ndim for a in axes)
    if sorted(axes) != list(range(ndim)):
        raise ValueError(f"bad transpose axes {axes}")
    return Expr("transpose", (x,), tuple(x.shape[a] for a in axes), aux=axes)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(x.shape, dtype=np.int64)):
        raise ShapeMismatchError(f"cannot reshape {x.shape} to {shape}")
    return Expr("reshape", (x,), shape)


# ---------------------------------------------------------------------------
# forward evaluation


def _fw_add(node, a, b):
    return a + b


def _fw_sub(node, a, b):
    return a - b


def _fw_mul(node, a, b):
    return a * b


def _fw_matmul(node, a, b):
    return a @ b


def _fw_sum(node, x):
    axes, keepdims = node.aux
    return x.sum(axis=axes, keepdims=keepdims)


def _fw_mean(node, x):
    axes, keepdims = node.aux
    return x.mean(axis=axes, keepdims=keepdims)


def _fw_square(node, x):
    return x * x


def _fw_exp(node, x):
    return np.exp(x)


def _fw_log(node, x):
    return np.log(x)


def _fw_sigmoid(node, x):
    return expit(x)


def _leaky_slopes(x):
    # slope 1 on the positive side, LEAKY_SLOPE at and below zero
    return LEAKY_SLOPE + (1.0 - LEAKY_SLOPE) * (x > 0.0)


def _fw_leakyrelu(node, x):
    return x * _leaky_slopes(x)


def _fw_concat(node, *parts):
    return np.concatenate(parts, axis=node.aux)


def _fw_slice(node, x):
    return x[node.aux]


def _fw_broadcast(node, x):
    return np.broadcast_to(x, node.shape)


def _fw_embed(node, table):
    return table[node.aux]


def _fw_transpose(node, x):
    return np.transpose(x, node.aux)


def _fw_reshape(node, x):
    return x.reshape(node.shape)


def _fw_stop(node, x):
    return x


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "matmul": _fw_matmul,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "square": _fw_square,
    "exp": _fw_exp,
    "log": _fw_log,
    "sigmoid": _fw_sigmoid,
    "leakyrelu": _fw_leakyrelu,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "broadcast": _fw_broadcast,
    "embed_lookup": _fw_embed,
    "transpose": _fw_transpose,
    "reshape": _fw_reshape,
    "stop_gradient": _fw_stop,
}


def _toposort(root):
    if root._topo is not None:
        return root._topo
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.children:
            stack.append((child, False))
    root._topo = tuple(order)
    return root._topo


def _bind(node, bindings):
    try:
        value = bindings[node.name]
    except KeyError:
        raise UnboundParameterError(f"parameter {node.name!r} is not bound")
    value = np.asarray(value, dtype=np.float64)
    if value.shape != node.shape:
        raise ShapeMismatchError(
            f"parameter {node.name!r}: bound shape {value.shape}, declared {node.shape}"
        )
    return value


def _forward_values(root, bindings, free_intermediates=False):
    """Evaluate every node; optionally free values once all consumers ran."""
    topo = _toposort(root)
    remaining = None
    if free_intermediates:
        remaining = {}
        for node in topo:
            for child in node.children:
                remaining[id(child)] = remaining.get(id(child), 0) + 1
    values = {}
    forward = _FORWARD
    # non-finite values are detected explicitly at the root; numpy's own
    # warnings on the way there are redundant noise
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in topo:
            kind = node.kind
            if kind == "parameter":
                value = _bind(node, bindings)
            elif kind == "constant":
                value = node.aux
            else:
                args = [values[id(c)] for c in node.children]
                value = forward[kind](node, *args)
                if free_intermediates:
                    for child in node.children:
                        remaining[id(child)] -= 1
                        if remaining[id(child)] == 0 and id(child) != id(root):
                            del values[id(child)]
            values[id(node)] = value
    return values


def _node_path(root, target):
    """Human-readable chain of node kinds from root down to target."""
    stack = [(root, [root])]
    seen = set()
    while stack:
        node, path = stack.pop()
        if node is target:
            return " -> ".join(p.name or p.kind for p in path)
        if id(node) in seen:
            continue
        seen.add(id(node))
        for child in node.children:
            stack.append((child, path + [child]))
    return target.kind


def _raise_non_finite(root, bindings):
    values = _forward_values(root, bindings)
    for node in _toposort(root):
        if not np.all(np.isfinite(values[id(node)])):
            raise NonFiniteError(
                f"non-finite value at node [{_node_path(root, node)}]"
            )
    raise NonFiniteError("non-finite value (location not reproducible)")


def evaluate(expr, bindings):
    """Forward-evaluate an expression under the given parameter bindings.

    Deterministic: identical bindings give bit-identical results. Raises
    NonFiniteError (with the offending node's path) if the result contains
    nan or inf.
    """
    values = _forward_values(expr, bindings, free_intermediates=True)
    out = values[id(expr)]
    if not np.all(np.isfinite(out)):
        _raise_non_finite(expr, bindings)
    return out


# ---------------------------------------------------------------------------
# reverse-mode gradients


def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _bw_add(node, g, vals):
    a, b = node.children
    return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _bw_sub(node, g, vals):
    a, b = node.children
    return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _bw_mul(node, g, vals):
    a, b = node.children
    av, bv = vals[id(a)], vals[id(b)]
    return (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))


def _bw_matmul(node, g, vals):
    a, b = node.children
    av, bv = vals[id(a)], vals[id(b)]
    ga = _unbroadcast(g @ _swap(bv), a.shape)
    gb = _unbroadcast(_swap(av) @ g, b.shape)
    return (ga, gb)


def _expand_reduced(node, g):
    axes, keepdims = node.aux
    child = node.children[0]
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, child.shape)


def _bw_sum(node, g, vals):
    return (_expand_reduced(node, g),)


def _bw_mean(node, g, vals):
    axes, _ = node.aux
    child = node.children[0]
    count = 1
    for ax in axes:
        count *= child.shape[ax]
    return (_expand_reduced(node, g) / count,)


def _bw_square(node, g, vals):
    x = vals[id(node.children[0])]
    return (2.0 * x * g,)


def _bw_exp(node, g, vals):
    return (vals[id(node)] * g,)


def _bw_log(node, g, vals):
    x = vals[id(node.children[0])]
    return (g / x,)


def _bw_sigmoid(node, g, vals):
    s = vals[id(node)]
    return (s * (1.0 - s) * g,)


def _bw_leakyrelu(node, g, vals):
    x = vals[id(node.children[0])]
    return (g * _leaky_slopes(x),)


def _bw_concat(node, g, vals):
    axis = node.aux
    sizes = [c.shape[axis] for c in node.children]
    offsets = np.cumsum(sizes[:-1])
    return tuple(np.split(g, offsets, axis=axis))


def _bw_slice(node, g, vals):
    child = node.children[0]
    out = np.zeros(child.shape)
    out[node.aux] = g
    return (out,)


def _bw_broadcast(node, g, vals):
    return (_unbroadcast(g, node.children[0].shape),)


def _bw_embed(node, g, vals):
    table = node.children[0]
    out = np.zeros(table.shape)
    np.add.at(out, node.aux, g)
    return (out,)


def _bw_transpose(node, g, vals):
    inverse = np.argsort(node.aux)
    return (np.transpose(g, inverse),)


def _bw_reshape(node, g, vals):
    return (g.reshape(node.children[0].shape),)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "square": _bw_square,
    "exp": _bw_exp,
    "log": _bw_log,
    "sigmoid": _bw_sigmoid,
    "leakyrelu": _bw_leakyrelu,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "broadcast": _bw_broadcast,
    "embed_lookup": _bw_embed,
    "transpose": _bw_transpose,
    "reshape": _bw_reshape,
}


def value_and_grad(expr, bindings, wrt):
    """Evaluate a scalar expression and its gradients in one pass.

    `wrt` is an iterable of parameter names, each of which must be bound.
    Stop-gradient nodes forward their value and contribute exactly zero to
    the backward sweep.
    """
    wrt = list(wrt)
    if expr.shape != ():
        raise ShapeMismatchError(f"gradient needs a scalar root, got shape {expr.shape}")
    values = _forward_values(expr, bindings)
    out = values[id(expr)]
    if not np.all(np.isfinite(out)):
        _raise_non_finite(expr, bindings)

    adjoints = {id(expr): np.ones(())}
    accum = {}
    backward = _BACKWARD
    for node in reversed(_toposort(expr)):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        kind = node.kind
        if kind == "parameter":
            prev = accum.get(node.name)
            accum[node.name] = g if prev is None else prev + g
            continue
        if kind in ("constant", "stop_gradient"):
            continue
        for child, cg in zip(node.children, backward[kind](node, g, values)):
            prev = adjoints.get(id(child))
            adjoints[id(child)] = cg if prev is None else prev + cg

    grads = {}
    for name in wrt:
        if name in accum:
            grads[name] = np.asarray(accum[name], dtype=np.float64)
        else:
            if name not in bindings:
                raise UnboundParameterError(f"parameter {name!r} is not bound")
            grads[name] = np.zeros(np.asarray(bindings[name]).shape)
    return float(out), grads


def gradient(expr, bindings, wrt):
    """Reverse-mode gradients of a scalar expression for the named parameters."""
    _, grads = value_and_grad(expr, bindings, wrt)
    return grads


def finite_difference_check(expr, bindings, wrt, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    The error for each checked coordinate is
    |analytic - central| / max(1, |analytic|); the maximum over all
    coordinates of all `wrt` parameters is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    wrt = list(wrt)
    grads = gradient(expr, bindings, wrt)
    work = dict(bindings)
    worst = 0.0
    for name in wrt:
        theta = np.array(np.asarray(bindings[name], dtype=np.float64))
        work[name] = theta
        for idx in np.ndindex(theta.shape):
            saved = theta[idx]
            theta[idx] = saved + step
            f_plus = float(evaluate(expr, work))
            theta[idx] = saved - step
            f_minus = float(evaluate(expr, work))
            theta[idx] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[name][idx])
            err = abs(analytic - numeric) / max(1.0, abs(analytic))
            if err > worst:
                worst = err
        work[name] = bindings[name]
    return worst
