"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` wraps a numpy array and records the op that produced it.
Backward rules are written against a small set of helpers that accept either
raw arrays or tensors, so the same rule serves first-order gradients (plain
arrays, no graph) and higher-order ones (``create_graph=True``, the rule
itself is recorded and can be differentiated again).

Leading axes behave as batch axes: ``matmul`` follows numpy's batched
semantics and elementwise ops broadcast, with gradients summed back onto the
operand shape.
"""
from __future__ import annotations

import itertools
import struct
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

DTYPE = np.float64

_grad_enabled = True

# ops whose second derivative is undefined somewhere on their domain
NON_SMOOTH_OPS = frozenset({"relu"})


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_idx", "_seq",
                 "name")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._idx = None
        self._seq = 0
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __len__(self):
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def mT(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        leaves = [n for n in _topo_order(self) if n._vjp is None and n.requires_grad]
        grads = grad(self, leaves, seed=seed)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    # a single reduction propagates any nan/inf
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")


_counter = itertools.count(1)


def _make(data, parents, vjp, op):
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    out._seq = next(_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# helpers usable on both arrays and tensors (backward rules are built on them)

def _t(x):
    if isinstance(x, Tensor):
        return transpose(x)
    return np.swapaxes(x, -1, -2)


def _reshape(x, shape):
    if isinstance(x, Tensor):
        return reshape(x, shape)
    return x.reshape(shape)


def _sum_to(x, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if tuple(x.shape) == tuple(shape):
        return x
    extra = len(x.shape) - len(shape)
    axes = tuple(range(extra)) + tuple(
        extra + i for i, s in enumerate(shape) if s == 1 and x.shape[extra + i] != 1)
    if isinstance(x, Tensor):
        return reshape(sum_(x, axes), shape)
    return x.sum(axis=axes).reshape(shape)


def _solve(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return solve(as_tensor(a), as_tensor(b))
    return np.linalg.solve(a, b)


def _sigmoid(x):
    if isinstance(x, Tensor):
        return sigmoid(x)
    return _np_sigmoid(x)


def _scatter(g, idx, shape):
    if isinstance(g, Tensor):
        return scatter(g, idx, shape)
    out = np.zeros(shape, dtype=DTYPE)
    if _is_basic_index(idx):
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return out


def _is_basic_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in idx)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(data, (a, b),
                 lambda g, out, x, y: (_sum_to(g, sa) if ra else None,
                                       _sum_to(g, sb) if rb else None), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g, out, x: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(data, (a, b),
                 lambda g, out, x, y: (_sum_to(g * y, sa) if ra else None,
                                       _sum_to(g * x, sb) if rb else None), "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from e
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g, out, x, y):
        ga = _sum_to(g @ _t(y), sa) if ra else None
        gb = None
        if rb:
            if len(sb) == 2 and len(sa) > 2 and not isinstance(g, Tensor):
                # shared weight: fold the batch axes into one product
                gb = x.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to(_t(x) @ g, sb)
        return ga, gb

    return _make(data, (a, b), vjp, "matmul")


def tanh(a):
    return _make(np.tanh(a.data), (a,), lambda g, out, x: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    return _make(_np_sigmoid(a.data), (a,),
                 lambda g, out, x: (g * (out * (1.0 - out)),), "sigmoid")


def softplus(a):
    return _make(np.logaddexp(0.0, a.data), (a,),
                 lambda g, out, x: (g * _sigmoid(x),), "softplus")


def exp(a):
    return _make(np.exp(a.data), (a,), lambda g, out, x: (g * out,), "exp")


def square(a):
    return _make(a.data * a.data, (a,), lambda g, out, x: (g * (2.0 * x),), "square")


def relu(a):
    # not twice differentiable; present so the smoothness guard has something to refuse
    return _make(np.maximum(a.data, 0.0), (a,),
                 lambda g, out, x: (g * (_data(x) > 0).astype(DTYPE),), "relu")


def identity(a):
    return _make(a.data.copy(), (a,), lambda g, out, x: (g,), "identity")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g, out, x):
        if isinstance(g, Tensor):
            return (reshape(g, kshape) * np.ones(shape, dtype=DTYPE),)
        return (np.broadcast_to(g.reshape(kshape), shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {src} -> {shape}") from e
    return _make(data, (a,), lambda g, out, x: (_reshape(g, src),), "reshape")


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose needs at least 2 axes")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g, out, x: (_t(g),), "transpose")


def getitem(a, idx):
    shape = a.shape
    out = _make(a.data[idx], (a,), lambda g, out, x: (_scatter(g, idx, shape),), "slice")
    out._idx = idx
    return out


def scatter(g, idx, shape):
    """Zeros of ``shape`` with ``g`` added at ``idx`` (adjoint of slicing)."""
    data = _scatter(g.data, idx, shape)
    return _make(data, (g,), lambda gg, out, x: (gg[idx],), "scatter")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from e
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    idxs = [(slice(None),) * ax + (slice(int(lo), int(hi)),)
            for lo, hi in zip(bounds[:-1], bounds[1:])]
    return _make(data, tuple(tensors),
                 lambda g, out, *xs: tuple(g[i] for i in idxs), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from e
    ax = axis % data.ndim
    idxs = [(slice(None),) * ax + (i,) for i in range(len(tensors))]
    return _make(data, tuple(tensors),
                 lambda g, out, *xs: tuple(g[i] for i in idxs), "stack")


def solve(a, b):
    """Batched ``a^{-1} b`` for square ``a`` (..., n, n) and ``b`` (..., n, k)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"solve: {a.shape}, {b.shape}")
    try:
        data = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as e:
        raise NonFiniteError("solve: singular matrix") from e
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g, out, x, y):
        gb = _solve(_t(x), g)
        return (_sum_to(-(gb @ _t(out)), sa) if ra else None,
                _sum_to(gb, sb) if rb else None)

    return _make(data, (a, b), vjp, "solve")


def inv(a):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"inv: {a.shape}")
    try:
        data = np.linalg.inv(a.data)
    except np.linalg.LinAlgError as e:
        raise NonFiniteError("inv: singular matrix") from e
    return _make(data, (a,), lambda g, out, x: (-(_t(out) @ g @ _t(out)),), "inv")


def gaussian_sample(mean_, log_var, noise):
    """Reparameterized draw ``mean + exp(log_var / 2) * noise``."""
    noise = np.asarray(_data(noise), dtype=DTYPE)
    if noise.shape != mean_.shape:
        raise ShapeError(f"noise {noise.shape} vs mean {mean_.shape}")
    return mean_ + exp(log_var * 0.5) * noise


# ---------------------------------------------------------------------------
# backward

def _topo_order(root):
    # creation order is a valid topological order: parents exist before children
    seen = {id(root): root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack_.append(p)
    return sorted(seen.values(), key=lambda n: n._seq)


def grad(output, inputs, seed=None, create_graph=False):
    """Gradients of ``output`` w.r.t. each tensor in ``inputs``.

    Without ``seed`` the output must hold a single element. Inputs with no
    path to the output get zeros. With ``create_graph`` the returned
    gradients are tensors that can be differentiated again.
    """
    if seed is None:
        if output.size != 1:
            raise ShapeError(f"gradient needs a scalar output or a seed, got {output.shape}")
        seed = np.ones(output.shape, dtype=DTYPE)
    else:
        seed = np.asarray(_data(seed), dtype=DTYPE)
        if seed.shape != output.shape:
            raise ShapeError(f"seed {seed.shape} vs output {output.shape}")
    order = _topo_order(output)
    keep = {id(t) for t in inputs}
    grads = {id(output): Tensor(seed) if create_graph else seed}
    owned = set()  # first-order buffers allocated here, safe to update in place

    def accumulate(p, pg):
        pid = id(p)
        prev = grads.get(pid)
        if prev is None:
            grads[pid] = pg
        elif pid in owned:
            prev += pg
        else:
            grads[pid] = prev + pg
            if not create_graph:
                owned.add(pid)

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            if id(node) not in keep:
                del grads[id(node)]
            if not create_graph and node._idx is not None:
                # slice: write straight into the parent's buffer
                p = node._parents[0]
                if not p.requires_grad:
                    continue
                pid = id(p)
                buf = grads.get(pid)
                if buf is None or pid not in owned:
                    new = np.zeros(p.shape, dtype=DTYPE)
                    if buf is not None:
                        new += buf
                    buf = grads[pid] = new
                    owned.add(pid)
                if _is_basic_index(node._idx):
                    buf[node._idx] += g
                else:
                    np.add.at(buf, node._idx, g)
                continue
            if create_graph:
                parent_grads = node._vjp(g, node, *node._parents)
            else:
                parent_grads = node._vjp(g, node.data, *[p.data for p in node._parents])
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                accumulate(p, pg)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=DTYPE)
            if create_graph:
                g = Tensor(g)
        elif not create_graph:
            _check_finite(g, "backward")
        result.append(g)
    return result


def path_ops(output):
    return {n._op for n in _topo_order(output)}


# ---------------------------------------------------------------------------
# parameter store

class ParameterStore:
    """Named trainable tensors shared by the networks of a model."""

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def arrays(self):
        return OrderedDict((k, v.data) for k, v in self._params.items())

    def load_arrays(self, arrays, strict=True):
        for name, value in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            t = self._params[name]
            value = np.asarray(value, dtype=DTYPE)
            if value.shape != t.shape:
                raise ShapeError(f"{name}: stored {value.shape} vs model {t.shape}")
            t.data = value.copy()
        if strict:
            missing = set(self._params) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")

    def clone(self):
        other = ParameterStore()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
        return other


MAGIC = b"DVK1"


def save_tensors(path, arrays):
    """Write named arrays: magic, count, then (name, shape, f64 data) records."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, value in arrays.items():
            value = np.array(value, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(value.tobytes())


def load_tensors(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic {buf[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError(f"{path}: truncated parameter file")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise ValueError(f"{path}: truncated parameter file")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise ValueError(f"{path}: truncated parameter file")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in parameter file")
    return arrays


def save_params(path, store):
    save_tensors(path, store.arrays())


def load_params(path, store):
    store.load_arrays(load_tensors(path))


# ---------------------------------------------------------------------------
# graph-level entry points. A "graph" is any callable mapping named input
# tensors to an output tensor (or dict of tensors); parameters live in a
# ParameterStore the callable closes over.

def evaluate(graph, inputs):
    with no_grad():
        out = graph(**{k: Tensor(v) for k, v in inputs.items()})
    if isinstance(out, dict):
        return {k: v.data.copy() for k, v in out.items()}
    return out.data.copy()


def gradient(graph, inputs, params=None, loss_seed=None, wrt_inputs=True):
    """d(loss)/d(parameter) for every parameter and, optionally, every input."""
    xs = {k: Tensor(v, requires_grad=wrt_inputs) for k, v in inputs.items()}
    ptensors = params.tensors() if params is not None else []
    with enable_grad():
        loss = graph(**xs)
    targets = ptensors + (list(xs.values()) if wrt_inputs else [])
    grads = grad(loss, targets, seed=loss_seed)
    out = {}
    if params is not None:
        out.update(zip(params.names(), grads[:len(ptensors)]))
    if wrt_inputs:
        out.update(zip(xs, grads[len(ptensors):]))
    return out


def second_derivative(graph, inputs, wrt, output_index=None):
    """Hessian of one scalar output w.r.t. the vector input ``wrt``.

    Each Hessian row is the gradient of one component of the (recorded)
    gradient, so there is one extra reverse sweep per input dimension.
    """
    xs = {k: Tensor(v, requires_grad=(k == wrt)) for k, v in inputs.items()}
    x = xs[wrt]
    if x.ndim != 1:
        raise ShapeError("second_derivative expects a vector input")
    with enable_grad():
        out = graph(**xs)
        if output_index is not None:
            out = out[output_index]
        if out.size != 1:
            raise ShapeError("second_derivative needs a scalar output")
        bad = path_ops(out) & NON_SMOOTH_OPS
        if bad:
            raise ValueError(f"path contains non-twice-differentiable ops: {sorted(bad)}")
        (g,) = grad(out, [x], create_graph=True)
    hess = np.zeros((x.size, x.size))
    for i in range(x.size):
        if not g.requires_grad:
            break
        (row,) = grad(g[i], [x])
        hess[i] = row
    return hess


def batch_jacobian(fn, z):
    """Per-row Jacobians of a row-wise map ``fn``: (N, m) -> (N, n).

    Returns ``(values (N, n), jac (N, n, m))``.
    """
    zt = Tensor(z, requires_grad=True)
    with enable_grad():
        out = fn(zt)
    n = out.shape[-1]
    jac = np.empty(out.shape + (z.shape[-1],))
    for i in range(n):
        seed = np.zeros(out.shape)
        seed[:, i] = 1.0
        (gi,) = grad(out, [zt], seed=seed)
        jac[:, i, :] = gi
    return out.data, jac


def batch_weighted_hessian(fn, z, weights):
    """Per-row Hessian of ``sum_i weights[:, i] * fn(z)[:, i]`` w.r.t. that row of ``z``.

    ``fn`` must act independently on rows; returns (N, m, m).
    """
    zt = Tensor(z, requires_grad=True)
    with enable_grad():
        out = fn(zt)
        bad = path_ops(out) & NON_SMOOTH_OPS
        if bad:
            raise ValueError(f"path contains non-twice-differentiable ops: {sorted(bad)}")
        s = (out * weights).sum()
        (g,) = grad(s, [zt], create_graph=True)
    m = z.shape[-1]
    hess = np.zeros(z.shape + (m,))
    if not g.requires_grad:
        return hess
    for j in range(m):
        (row,) = grad(g[:, j].sum(), [zt])
        hess[:, j, :] = row
    return hess
