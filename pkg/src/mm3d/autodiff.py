"""Reverse-mode autodiff over float32 numpy arrays.

A Tape records every primitive applied to gradient-carrying tensors, in
execution order; backward() replays the records in reverse. The op set is
deliberately small: 2-D matmul, elementwise add/mul, last-axis concat, relu,
row gather, uniform segmented max, scalar scale, full sum, last-axis
logsumexp, and row L2 normalization. That is enough for the hierarchical
encoder, the folding decoder, and both training losses.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "matmul", "add", "mul", "concat", "relu", "gather",
    "max_over_group", "scale", "sum_all", "logsumexp", "l2norm_rows",
    "backward", "gradcheck",
]


class Tensor:
    """Dense float32 array plus gradient slot.

    Training always runs in float32. float64 is allowed only so gradient
    verification can run the same graph at a usable finite-difference
    resolution; ops propagate the wider dtype automatically.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        if dtype not in (np.float32, np.float64):
            raise ContractError(f"unsupported tensor dtype {dtype}")
        # asarray keeps 0-d scalars 0-d; ascontiguousarray would promote them.
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications (already topological)."""

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def _result(tape, inputs, out_data, op, backward_fn):
    _check_finite(out_data, op)
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg, dtype=out_data.dtype.type)
    if rg:
        tape._ops.append((out, backward_fn))
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.data.shape, dtype=t.data.dtype)
    t.grad += g


def matmul(a, b, tape=None):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g, a=a, b=b):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(tape, (a, b), out_data, "matmul", bwd)


def add(a, b, tape=None):
    """Elementwise add; also accepts a 1-D bias broadcast over rows of a 2-D a."""
    bias = a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]
    if not bias and a.data.shape != b.data.shape:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}")
    out_data = a.data + b.data

    def bwd(g, a=a, b=b, bias=bias):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0) if bias else g)

    return _result(tape, (a, b), out_data, "add", bwd)


def mul(a, b, tape=None):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}")
    out_data = a.data * b.data

    def bwd(g, a=a, b=b):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(tape, (a, b), out_data, "mul", bwd)


def concat(tensors, tape=None):
    """Concatenate along the last axis."""
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat: leading dims differ {tensors[0].data.shape} vs {t.data.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.data.shape[-1] for t in tensors]

    def bwd(g, tensors=tensors, widths=widths):
        off = 0
        for t, w in zip(tensors, widths):
            _accumulate(t, g[..., off:off + w])
            off += w

    return _result(tape, tuple(tensors), out_data, "concat", bwd)


def relu(a, tape=None):
    out_data = np.maximum(a.data, 0.0)

    def bwd(g, a=a):
        _accumulate(a, g * (a.data > 0.0))

    return _result(tape, (a,), out_data, "relu", bwd)


def gather(a, rows, tape=None):
    """Select rows of a 2-D tensor by integer index (repeats allowed)."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather: expected 2-D input, got {a.data.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    out_data = a.data[rows]

    def bwd(g, a=a, rows=rows):
        if a.requires_grad:
            acc = np.zeros(a.data.shape, dtype=a.data.dtype)
            np.add.at(acc, rows, g)
            _accumulate(a, acc)

    return _result(tape, (a,), out_data, "gather", bwd)


def max_over_group(a, group_size, tape=None):
    """Columnwise max over consecutive groups of `group_size` rows.

    Input (G*group_size, C) -> output (G, C). Gradient routes to the first
    maximal row inside each group (ties resolved by lowest row index).
    """
    if a.data.ndim != 2 or a.data.shape[0] % group_size != 0:
        raise ShapeError(
            f"max_over_group: rows of {a.data.shape} not divisible by group {group_size}")
    n_groups = a.data.shape[0] // group_size
    cols = a.data.shape[1]
    grouped = a.data.reshape(n_groups, group_size, cols)
    arg = grouped.argmax(axis=1)
    out_data = np.take_along_axis(grouped, arg[:, None, :], axis=1)[:, 0, :]

    def bwd(g, a=a, arg=arg, n_groups=n_groups, group_size=group_size, cols=cols):
        acc = np.zeros((n_groups, group_size, cols), dtype=a.data.dtype)
        np.put_along_axis(acc, arg[:, None, :], g[:, None, :], axis=1)
        _accumulate(a, acc.reshape(a.data.shape))

    return _result(tape, (a,), out_data, "max_over_group", bwd)


def scale(a, c, tape=None):
    c_typed = a.data.dtype.type(c)
    out_data = a.data * c_typed

    def bwd(g, a=a, c_typed=c_typed):
        _accumulate(a, g * c_typed)

    return _result(tape, (a,), out_data, "scale", bwd)


def sum_all(a, tape=None):
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g, a=a):
        _accumulate(a, np.full(a.data.shape, g, dtype=a.data.dtype))

    return _result(tape, (a,), out_data, "sum_all", bwd)


def logsumexp(a, tape=None):
    """Stable log-sum-exp over the last axis of a 2-D tensor, keepdims."""
    if a.data.ndim != 2:
        raise ShapeError(f"logsumexp: expected 2-D input, got {a.data.shape}")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out_data = m + np.log(s)
    probs = e / s

    def bwd(g, a=a, probs=probs):
        _accumulate(a, g * probs)

    return _result(tape, (a,), out_data, "logsumexp", bwd)


def l2norm_rows(a, tape=None, eps=1e-12):
    """Normalize each row of a 2-D tensor to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise ShapeError(f"l2norm_rows: expected 2-D input, got {a.data.shape}")
    norms = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    r = np.maximum(norms, eps).astype(a.data.dtype)
    out_data = a.data / r

    def bwd(g, a=a, r=r, out_data=out_data):
        inner = (out_data * g).sum(axis=1, keepdims=True)
        _accumulate(a, (g - out_data * inner) / r)

    return _result(tape, (a,), out_data, "l2norm_rows", bwd)


def backward(tape, root, leaves=None):
    """Accumulate gradients of a scalar root into every tensor on the tape.

    Returns the gradient arrays for `leaves` when given; leaves the root did
    not touch get zeros.
    """
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.data.shape}")
    if root.grad is None:
        root.grad = np.zeros(root.data.shape, dtype=root.data.dtype)
    root.grad += np.ones(root.data.shape, dtype=root.data.dtype)
    for out, bwd_fn in reversed(tape._ops):
        if out.grad is not None:
            bwd_fn(out.grad)
    if leaves is None:
        return None
    return [
        t.grad if t.grad is not None else np.zeros(t.data.shape, dtype=t.data.dtype)
        for t in leaves
    ]


def gradcheck(f, x, eps=1e-3):
    """Max relative error of the analytic gradient of f against central differences.

    `f(tensor, tape) -> scalar Tensor` must rebuild its computation on each
    call. The error metric per coordinate is |a-n| / max(1e-8, |a|+|n|).
    """
    dtype = x.data.dtype.type
    tape = Tape()
    xt = Tensor(x.data.copy(), requires_grad=True, dtype=dtype)
    root = f(xt, tape)
    (analytic,) = backward(tape, root, leaves=[xt])
    analytic = analytic.astype(np.float64).ravel()

    flat = x.data.ravel()
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x.data, dtype=dtype), Tape()).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x.data, dtype=dtype), Tape()).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
