"""Small reverse-mode AD engine with traced forward-mode tangents.

Every value is a 2-D float64 array (rows are batch items, vectors are
``(1, n)``). The primitive set is closed: ``matmul``, ``add``, ``mul``,
``tanh``, ``sigmoid``, ``sum`` and ``scale``. Forward-mode tangents are built
from the same primitives, so a Jacobian-vector product can itself be
differentiated in reverse mode (needed for the gradient of a divergence).
Forward-over-forward is refused; the nesting depth is capped at 2.

``external`` nodes let model code with hand-written gradients (log-densities,
KDE terms) sit inside a reverse-mode graph. They have no tangent rule.
"""
import itertools
import threading
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, PFBRError, ShapeMismatchError, UnsupportedNestingError

__all__ = [
    "ParamVector", "Var", "Function", "const", "leaf", "stop_gradient", "external",
    "matmul", "add", "mul", "tanh", "sigmoid", "sum", "scale",
    "backward", "tangents", "evaluate", "vjp", "jvp", "grad_of_scalar", "param_vars",
    "collect_grads",
]

MAX_NESTING = 2

_ids = itertools.count()
_state = threading.local()


def _level():
    return getattr(_state, "level", 0)


class ParamVector:
    """Flat float64 parameter storage with named, shaped segments."""

    __slots__ = ("values", "layout", "_index")

    def __init__(self, values, layout):
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        layout = tuple((str(n), int(o), tuple(int(s) for s in sh)) for n, o, sh in layout)
        names = [n for n, _, _ in layout]
        if len(set(names)) != len(names):
            raise ShapeMismatchError("duplicate segment names in layout")
        total = 0
        for name, offset, shape in layout:
            if offset != total:
                raise ShapeMismatchError(f"segment {name!r} is not contiguous")
            total += int(np.prod(shape))
        if total != values.size:
            raise ShapeMismatchError(f"layout covers {total} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("ParamVector holds non-finite values")
        self.values = values
        self.layout = layout
        self._index = {n: (o, sh) for n, o, sh in layout}

    @classmethod
    def from_arrays(cls, arrays):
        """Build from an ordered mapping ``name -> array``."""
        layout, chunks, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append((name, offset, arr.shape))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @property
    def names(self):
        return [n for n, _, _ in self.layout]

    @property
    def size(self):
        return self.values.size

    def segment(self, name):
        offset, shape = self._index[name]
        return self.values[offset:offset + int(np.prod(shape))].reshape(shape)

    def arrays(self):
        return {n: self.segment(n) for n in self.names}

    def with_values(self, values):
        return ParamVector(values, self.layout)

    def zeros_like(self):
        return ParamVector(np.zeros_like(self.values), self.layout)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        return (isinstance(other, ParamVector) and self.layout == other.layout
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"ParamVector(size={self.size}, segments={self.names})"


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "op", "parents", "backward", "attrs", "depth", "id", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, value, op="const", parents=(), backward=None, attrs=None,
                 requires_grad=False):
        self.value = value
        self.op = op
        self.parents = parents
        self.backward = backward
        self.attrs = attrs
        self.requires_grad = requires_grad
        depth = _level()
        for p in parents:
            if p.depth > depth:
                depth = p.depth
        self.depth = depth
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


def _as2d(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeMismatchError(f"values must be at most 2-D, got shape {a.shape}")
    return a


def const(x):
    """A node that never receives gradient."""
    if isinstance(x, Var):
        return x
    return Var(_as2d(x))


def leaf(x):
    """A differentiable input node."""
    return Var(_as2d(x).copy(), op="leaf", requires_grad=True)


def stop_gradient(v):
    return Var(v.value, op="const")


def _wrap(x):
    return x if isinstance(x, Var) else const(x)


def _check(value, op):
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


def _node(value, op, parents, backward, attrs=None):
    _check(value, op)
    req = any(p.requires_grad for p in parents)
    return Var(value, op, parents, backward if req else None, attrs, req)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_ok(sa, sb):
    return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul {av.shape} @ {bv.shape}")

    def back(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)
    return _node(av @ bv, "matmul", (a, b), back)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    if not _broadcast_ok(sa, sb):
        raise ShapeMismatchError(f"add {sa} + {sb}")

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)
    return _node(a.value + b.value, "add", (a, b), back)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if not _broadcast_ok(av.shape, bv.shape):
        raise ShapeMismatchError(f"mul {av.shape} * {bv.shape}")

    def back(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)
    return _node(av * bv, "mul", (a, b), back)


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.value)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _wrap(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(y, "sigmoid", (a,), lambda g: (g * (y * (1.0 - y)),))


def sum(a, axis=None):  # noqa: A001 - mirrors the primitive's name
    a = _wrap(a)
    shape = a.value.shape
    if axis is None:
        value = np.array([[a.value.sum()]])
    else:
        value = a.value.sum(axis=axis, keepdims=True)
    return _node(value, "sum", (a,), lambda g: (np.broadcast_to(g, shape),), attrs=axis)


def scale(a, c):
    a = _wrap(a)
    c = float(c)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,), attrs=c)


def external(value, parents, vjp_fn, name="external"):
    """Reverse-only node with a user supplied vector-Jacobian product.

    ``vjp_fn(g)`` must return one array (or ``None``) per parent.
    """
    parents = tuple(_wrap(p) for p in parents)
    return _node(_as2d(value), name, parents, vjp_fn, attrs="external")


# ---------------------------------------------------------------- reverse mode

def _reachable(outputs, grad_only=False):
    seen, stack, nodes = set(), list(outputs), []
    while stack:
        v = stack.pop()
        if v.id in seen:
            continue
        seen.add(v.id)
        nodes.append(v)
        if grad_only:
            stack.extend(p for p in v.parents if p.requires_grad)
        else:
            stack.extend(v.parents)
    nodes.sort(key=lambda v: v.id, reverse=True)
    return nodes


def backward(outputs, cotangents, wrt):
    """Accumulate ``sum_k cotangent_k . d output_k`` into each node of ``wrt``.

    Returns one array per ``wrt`` node (zeros when it is unreachable).
    """
    if _level() > 0:
        raise UnsupportedNestingError("reverse mode cannot run inside a tangent trace")
    grads = {}
    for out, ct in zip(outputs, cotangents):
        ct = np.broadcast_to(np.asarray(ct, dtype=np.float64), out.value.shape)
        grads[out.id] = grads[out.id] + ct if out.id in grads else np.array(ct)
    for node in _reachable([o for o in outputs if o.requires_grad], grad_only=True):
        if node.backward is None:
            continue
        g = grads.get(node.id)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    result = []
    for w in wrt:
        g = grads.get(w.id)
        g = np.zeros_like(w.value) if g is None else np.asarray(g, dtype=np.float64)
        result.append(_check(g, "backward pass"))
    return result


# ---------------------------------------------------------------- forward mode

def _tangent_rule(node, tans, cache):
    op, ps = node.op, node.parents
    if op == "add":
        ta, tb = tans
        if ta is None:
            return tb
        return ta if tb is None else add(ta, tb)
    if op == "mul":
        ta, tb = tans
        out = None if ta is None else mul(ta, ps[1])
        if tb is not None:
            t2 = mul(ps[0], tb)
            out = t2 if out is None else add(out, t2)
        return out
    if op == "matmul":
        ta, tb = tans
        out = None if ta is None else matmul(ta, ps[1])
        if tb is not None:
            t2 = matmul(ps[0], tb)
            out = t2 if out is None else add(out, t2)
        return out
    if op in ("tanh", "sigmoid"):
        factor = cache.get(node.id)
        if factor is None:
            if op == "tanh":
                factor = add(const(1.0), scale(mul(node, node), -1.0))
            else:
                factor = add(node, scale(mul(node, node), -1.0))
            cache[node.id] = factor
        return mul(factor, tans[0])
    if op == "sum":
        return sum(tans[0], axis=node.attrs)
    if op == "scale":
        return scale(tans[0], node.attrs)
    raise PFBRError(f"no tangent rule for {op!r} nodes")


def tangents(output, inputs, directions):
    """Traced Jacobian-vector products of ``output`` w.r.t. ``inputs``.

    ``directions`` is a list; each entry holds one tangent per input. Returns
    a list of Vars (one per direction) that are themselves differentiable.
    """
    ids = {v.id: i for i, v in enumerate(inputs)}
    # nodes older than every input cannot depend on them
    min_id = min(ids)
    seen, stack, nodes = set(), [output], []
    while stack:
        v = stack.pop()
        if v.id in seen or v.id < min_id:
            continue
        seen.add(v.id)
        nodes.append(v)
        if v.id not in ids:
            stack.extend(v.parents)
    nodes.sort(key=lambda v: v.id)
    depends = set()
    for v in nodes:
        if v.id in ids or any(p.id in depends for p in v.parents):
            if v.depth >= 1:
                raise UnsupportedNestingError(
                    f"tangent of a tangent requested (depth > {MAX_NESTING})")
            depends.add(v.id)
    results = []
    prev = _level()
    _state.level = 1
    try:
        cache = {}
        for direction in directions:
            tan = {}
            for v in nodes:
                if v.id not in depends:
                    continue
                if v.id in ids:
                    tan[v.id] = _wrap(direction[ids[v.id]])
                    continue
                if v.attrs == "external":
                    raise UnsupportedNestingError(f"{v.op} node has no forward-mode rule")
                tan[v.id] = _tangent_rule(v, [tan.get(p.id) for p in v.parents], cache)
            t = tan.get(output.id)
            results.append(t if t is not None else const(np.zeros_like(output.value)))
    finally:
        _state.level = prev
    return results


# ---------------------------------------------------------------- function API

@dataclass(frozen=True)
class Function:
    """A computation description: ``body(x, params) -> Var`` with fixed arity."""

    body: object
    in_dim: int
    out_dim: int = None
    name: str = "fn"

    def __call__(self, x, params):
        return self.body(x, params)


def _arity(fn, inputs):
    x = np.asarray(inputs, dtype=np.float64).reshape(-1)
    in_dim = getattr(fn, "in_dim", None)
    if in_dim is not None and x.size != in_dim:
        raise ShapeMismatchError(f"{getattr(fn, 'name', 'fn')} expects {in_dim} inputs, got {x.size}")
    return x


def param_vars(params):
    """One leaf Var per segment of a ParamVector."""
    return {n: Var(np.array(a, ndmin=2) if a.ndim < 2 else a, op="leaf", requires_grad=True)
            for n, a in params.arrays().items()}


def collect_grads(params, pvars, grads):
    """Flatten per-segment gradients back into a ParamVector."""
    chunks = []
    for name in params.names:
        g = grads.get(name)
        seg = params.segment(name)
        chunks.append(np.zeros(seg.size) if g is None else np.asarray(g).reshape(-1))
    return params.with_values(np.concatenate(chunks) if chunks else np.zeros(0))


def _run(fn, x, params, req_x=True):
    xv = leaf(x) if req_x else const(x)
    pv = param_vars(params) if params is not None else {}
    out = fn(xv, pv)
    if not isinstance(out, Var):
        raise ShapeMismatchError("fn must return a Var")
    return xv, pv, out


def evaluate(fn, inputs, params=None):
    """Value of ``fn(inputs; params)`` as a 1-D array."""
    x = _arity(fn, inputs)
    _, _, out = _run(fn, x, params, req_x=False)
    return out.value.reshape(-1).copy()


def vjp(fn, inputs, params, cotangent):
    """Return ``(J_x^T c, J_theta^T c)``; the second is a ParamVector."""
    x = _arity(fn, inputs)
    xv, pv, out = _run(fn, x, params)
    c = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    if c.size != out.value.size:
        raise ShapeMismatchError(f"cotangent has length {c.size}, output has {out.value.size}")
    names = list(pv)
    gs = backward([out], [c.reshape(out.value.shape)], [xv] + [pv[n] for n in names])
    grad_params = collect_grads(params, pv, dict(zip(names, gs[1:]))) if params is not None else None
    return gs[0].reshape(-1), grad_params


def jvp(fn, inputs, params, tangent):
    """Return ``J_x t`` as a 1-D array."""
    x = _arity(fn, inputs)
    t = np.asarray(tangent, dtype=np.float64).reshape(-1)
    if t.size != x.size:
        raise ShapeMismatchError(f"tangent has length {t.size}, input has {x.size}")
    xv, _, out = _run(fn, x, params)
    (tv,) = tangents(out, [xv], [[t.reshape(xv.value.shape)]])
    return tv.value.reshape(-1).copy()


def grad_of_scalar(fn_scalar, inputs, params):
    """Gradient of a scalar-valued ``fn`` w.r.t. inputs and params.

    ``fn_scalar`` may call :func:`tangents` internally (reverse-over-forward).
    """
    x = _arity(fn_scalar, inputs)
    xv, pv, out = _run(fn_scalar, x, params)
    if out.value.size != 1:
        raise ShapeMismatchError(f"fn_scalar returned {out.value.size} values")
    names = list(pv)
    gs = backward([out], [np.ones_like(out.value)], [xv] + [pv[n] for n in names])
    grad_params = collect_grads(params, pv, dict(zip(names, gs[1:]))) if params is not None else None
    return gs[0].reshape(-1), grad_params
