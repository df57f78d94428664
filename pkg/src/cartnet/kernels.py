"""Differentiable array primitives with reverse-mode gradients.

Each operation returns a :class:`Var` that remembers its inputs and a
closure mapping the output gradient to input gradients. Calling
``loss.backward()`` walks the recorded graph in reverse topological order.
:class:`Param` leaves accumulate gradients across calls until
:meth:`Param.zero_grad`, which is what gradient accumulation relies on.

Everything runs in float64, and all reductions use a fixed order so
repeated evaluations are bitwise identical.
"""
from __future__ import annotations

import json
import struct

import numpy as np
from scipy.special import expit

from .errors import BatchTooSmall, IndexOutOfRange, ShapeMismatch

SOFTPLUS_LINEAR_ABOVE = 30.0
_TINY = np.finfo(np.float64).tiny


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Var{label} shape={self.value.shape}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default: ones, i.e. d(self)/d(self)) to all inputs."""
        if grad is None:
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(grad, self.value.shape))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


class Param(Var):
    """Trainable leaf. ``grad`` persists between backward passes."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def as_var(x):
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _send(var, g):
    if var.requires_grad:
        var._accumulate(g)


# --- elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_var(a), as_var(b)

    def back(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return Var(a.value + b.value, (a, b), back)


def sub(a, b):
    a, b = as_var(a), as_var(b)

    def back(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(-g, b.shape))

    return Var(a.value - b.value, (a, b), back)


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_var(a), as_var(b)

    def back(g):
        if a.requires_grad:
            _send(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _send(b, _unbroadcast(g * a.value, b.shape))

    return Var(a.value * b.value, (a, b), back)


def sigmoid(x):
    x = as_var(x)
    s = expit(x.value)

    def back(g):
        _send(x, g * s * (1.0 - s))

    return Var(s, (x,), back)


def silu(x):
    x = as_var(x)
    s = expit(x.value)

    def back(g):
        _send(x, g * s * (1.0 + x.value * (1.0 - s)))

    return Var(x.value * s, (x,), back)


def softplus_value(x):
    """log(1 + e^x), exact identity above 30, never below the smallest normal float."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > SOFTPLUS_LINEAR_ABOVE, x,
                   np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))
    return np.maximum(out, _TINY)


def softplus(x):
    x = as_var(x)

    def back(g):
        _send(x, g * expit(x.value))

    return Var(softplus_value(x.value), (x,), back)


def absolute(x):
    """|x| with subgradient 0 at exactly 0."""
    x = as_var(x)

    def back(g):
        _send(x, g * np.sign(x.value))

    return Var(np.abs(x.value), (x,), back)


# --- reductions and reshaping ---------------------------------------------------

def total(x):
    x = as_var(x)

    def back(g):
        _send(x, np.broadcast_to(g, x.shape))

    return Var(np.sum(x.value), (x,), back)


def mean(x):
    x = as_var(x)
    n = x.value.size

    def back(g):
        _send(x, np.broadcast_to(g / n, x.shape))

    return Var(np.sum(x.value) / n, (x,), back)


def reshape(x, shape):
    x = as_var(x)

    def back(g):
        _send(x, g.reshape(x.shape))

    return Var(x.value.reshape(shape), (x,), back)


def concat(xs, axis=-1):
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _send(x, part)

    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return Var(out, xs, back)


def gather(x, index):
    """Rows ``x[index]``; gradients scatter-add back onto the selected rows."""
    x = as_var(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexOutOfRange(f"row index outside [0, {n})")

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            np.add.at(gx, index, g)
            _send(x, gx)

    return Var(x.value[index], (x,), back)


def embedding(index, table):
    """Row lookup into ``table``; only selected rows receive gradient."""
    table = as_var(table)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexOutOfRange(
            f"embedding index outside [0, {table.shape[0]}): {index.min()}..{index.max()}")
    return gather(table, index)


def segment_sum(values, segment_ids, n_segments):
    """Sum rows of ``values`` per segment; empty segments give zero rows.

    Rows are added in ascending index order (``np.add.at`` is unbuffered and
    sequential), so results are bitwise reproducible.
    """
    values = as_var(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"{ids.shape[0]} segment ids for {values.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise IndexOutOfRange(f"segment id outside [0, {n_segments})")
    out = np.zeros((n_segments,) + values.shape[1:])
    np.add.at(out, ids, values.value)

    def back(g):
        _send(values, g[ids])

    return Var(out, (values,), back)


# --- dense layers ---------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ weight + bias`` for x of shape [n, d_in] and weight [d_in, d_out]."""
    x, weight = as_var(x), as_var(weight)
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.value @ weight.value
    parents = [x, weight]
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.value
        parents.append(bias)

    def back(g):
        if x.requires_grad:
            _send(x, g @ weight.value.T)
        if weight.requires_grad:
            _send(weight, x.value.T @ g)
        if bias is not None and bias.requires_grad:
            _send(bias, g.sum(axis=0))

    return Var(out, parents, back)


class BatchNorm:
    """Per-feature batch normalization with running statistics."""

    def __init__(self, dim, name, momentum=0.1, eps=1e-5):
        self.gamma = Param(np.ones(dim), f"{name}.gamma")
        self.beta = Param(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


def batch_norm(x, state, training):
    """Normalize ``x`` [n, d] by batch statistics (training) or running ones (eval).

    Training normalizes with the biased batch variance and updates the running
    variance with the unbiased one.
    """
    x = as_var(x)
    gamma, beta = state.gamma, state.beta
    if training:
        n = x.shape[0]
        if n < 2:
            raise BatchTooSmall(f"batch norm {state.name!r} needs >= 2 rows in training, got {n}")
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.value - mu) * inv_std
        m = state.momentum
        state.running_mean[:] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[:] = (1.0 - m) * state.running_var + m * var * n / (n - 1)

        def back(g):
            if gamma.requires_grad:
                _send(gamma, np.sum(g * xhat, axis=0))
            if beta.requires_grad:
                _send(beta, np.sum(g, axis=0))
            if x.requires_grad:
                dxhat = g * gamma.value
                gx = (inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
                _send(x, gx)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.value - state.running_mean) * inv_std

        def back(g):
            if gamma.requires_grad:
                _send(gamma, np.sum(g * xhat, axis=0))
            if beta.requires_grad:
                _send(beta, np.sum(g, axis=0))
            if x.requires_grad:
                _send(x, g * gamma.value * inv_std)

    return Var(gamma.value * xhat + beta.value, (x, gamma, beta), back)


# --- initialization -------------------------------------------------------------

def init_linear(rng, d_in, d_out, name):
    """Weights uniform in +-1/sqrt(fan_in), zero bias."""
    bound = 1.0 / np.sqrt(d_in)
    return (Param(rng.uniform(-bound, bound, size=(d_in, d_out)), f"{name}.weight"),
            Param(np.zeros(d_out), f"{name}.bias"))


def init_embedding(rng, n_vocab, dim, name):
    """Unit-variance uniform rows."""
    bound = np.sqrt(3.0)
    return Param(rng.uniform(-bound, bound, size=(n_vocab, dim)), f"{name}.weight")


# --- checkpoint container -------------------------------------------------------

MAGIC = b"CARTNETCKPT\n"
FORMAT_VERSION = 1


def save_arrays(path, arrays, manifest=None):
    """Write named float64 arrays plus a JSON manifest.

    Layout: magic line, little-endian u64 header length, JSON header, then
    the raw row-major little-endian float64 data of each array in order.
    Output bytes depend only on the inputs.
    """
    entries = []
    offset = 0
    blobs = []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"version": FORMAT_VERSION, "manifest": manifest or {}, "arrays": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size))
        data = fh.read()
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, header["manifest"]
