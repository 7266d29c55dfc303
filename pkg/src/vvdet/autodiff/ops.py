"""Differentiable primitives over :class:`Value`.

Every op checks operand shapes, computes the forward result with numpy and
registers a closure that pushes the output gradient to its parents.
"""
import numpy as np

from vvdet import kernels
from vvdet.autodiff.value import ShapeError, Value, as_value


def _node(data, parents, op, backward):
    out = Value(data, _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def neg(a):
    return scale(a, -1.0)


def scale(a, c):
    """Multiply by a Python scalar."""
    c = float(c)

    def backward(g):
        a._accum(g * c)

    return _node(a.data * c, (a,), "scale", backward)


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions must agree")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)

    return _node(a.data * mask, (a,), "relu", backward)


def exp(a):
    y = np.exp(a.data)

    def backward(g):
        a._accum(g * y)

    return _node(y, (a,), "exp", backward)


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")

    def backward(g):
        a._accum(g / a.data)

    return _node(np.log(a.data), (a,), "log", backward)


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accum(g * y * (1.0 - y))

    return _node(y, (a,), "sigmoid", backward)


def softplus(a):
    """``log(1 + exp(x))`` computed without overflow."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accum(g * 0.5 * (1.0 + np.tanh(0.5 * x)))

    return _node(y, (a,), "softplus", backward)


def abs(a):  # noqa: A001 - mirrors numpy naming
    s = np.sign(a.data)

    def backward(g):
        a._accum(g * s)

    return _node(np.abs(a.data), (a,), "abs", backward)


def power(a, p):
    """Elementwise ``a ** p`` for ``a >= 0`` and real ``p``."""
    p = float(p)
    x = a.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(x > 0, p * x ** (p - 1.0), 1.0 if p == 1.0 else 0.0)
        a._accum(g * d)

    return _node(x ** p, (a,), "power", backward)


def sum(a, axis=None):  # noqa: A001
    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(a.data.sum(axis=axis), (a,), "sum", backward)


def mean(a):
    n = max(a.data.size, 1)
    return scale(sum(a), 1.0 / n)


def reshape(a, shape):
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), "reshape", backward)


def concat(values, axis=1):
    values = [as_value(v) for v in values]
    ref = values[0].shape
    for v in values[1:]:
        if v.data.ndim != len(ref) or any(
            v.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError("concat", *[x.shape for x in values], detail=f"axis={axis}")
    sizes = [v.shape[axis] for v in values]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for v, part in zip(values, np.split(g, cuts, axis=axis)):
            v._accum(part)

    return _node(np.concatenate([v.data for v in values], axis=axis), tuple(values), "concat", backward)


def gather(a, idx):
    """Select rows ``a[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")
    idx = np.where(idx < 0, idx + n, idx)

    def backward(g):
        flat = g.reshape(len(idx), -1)
        a._accum(kernels.scatter_add_rows(flat, idx, n).reshape(a.shape))

    return _node(a.data[idx], (a,), "gather", backward)


def scatter_add(a, idx, n):
    """Sum rows of ``a`` into ``n`` output rows: ``out[idx[i]] += a[i]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != a.shape[0]:
        raise ShapeError("scatter_add", a.shape, idx.shape, detail="one index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"scatter_add: index out of range for {n} rows")
    flat = a.data.reshape(len(idx), -1)
    out = kernels.scatter_add_rows(flat, idx, n).reshape((n,) + a.shape[1:])

    def backward(g):
        a._accum(g[idx])

    return _node(out, (a,), "scatter_add", backward)


def segment_max(a, seg, num_segments):
    """Per-group column max; empty groups give zeros, ties route to the lowest row."""
    seg = np.asarray(seg, dtype=np.int64)
    if a.data.ndim != 2 or len(seg) != a.shape[0]:
        raise ShapeError("segment_max", a.shape, seg.shape, detail="one group id per row")
    out, arg = kernels.segment_max(a.data, seg, num_segments)

    def backward(g):
        valid = arg >= 0
        rows = arg[valid]
        cols = np.nonzero(valid)[1]
        grad = np.zeros(a.shape)
        # each (row, col) pair is unique: a row is argmax of a column for one group only
        grad[rows, cols] = g[valid]
        a._accum(grad)

    return _node(out, (a,), "segment_max", backward)


def segment_mean(a, seg, num_segments):
    """Per-group row mean; empty groups give zeros."""
    seg = np.asarray(seg, dtype=np.int64)
    if a.data.ndim != 2 or len(seg) != a.shape[0]:
        raise ShapeError("segment_mean", a.shape, seg.shape, detail="one group id per row")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    out = kernels.scatter_add_rows(a.data, seg, num_segments) * inv[:, None]

    def backward(g):
        a._accum((g * inv[:, None])[seg])

    return _node(out, (a,), "segment_mean", backward)


def sparse_conv(feats, weight, bias, kmap, n_out):
    """Sum over kernel offsets of ``W[k]`` applied along the (in, out) pairs of ``kmap``."""
    if weight.data.ndim != 3 or weight.shape[0] != len(kmap.pairs) or weight.shape[1] != feats.shape[1]:
        raise ShapeError("sparse_conv", feats.shape, weight.shape,
                         detail=f"expected weight [{len(kmap.pairs)}, {feats.shape[1]}, C_out]")
    c_out = weight.shape[2]
    x, w = feats.data, weight.data
    out = np.zeros((n_out, c_out))
    for k, (i_in, i_out) in enumerate(kmap.pairs):
        if len(i_in):
            # outputs are unique within one offset, so fancy-index accumulation is exact
            out[i_out] += x[i_in] @ w[k]
    parents = (feats, weight)
    if bias is not None:
        out += bias.data
        parents = parents + (bias,)

    def backward(g):
        if feats.requires_grad:
            gx = np.zeros(x.shape)
            for k, (i_in, i_out) in enumerate(kmap.pairs):
                if len(i_in):
                    gx[i_in] += g[i_out] @ w[k].T
            feats._accum(gx)
        if weight.requires_grad:
            gw = np.zeros(w.shape)
            for k, (i_in, i_out) in enumerate(kmap.pairs):
                if len(i_in):
                    gw[k] = x[i_in].T @ g[i_out]
            weight._accum(gw)
        if bias is not None:
            bias._accum(g.sum(axis=0))

    return _node(out, parents, "sparse_conv", backward)


def batch_norm(a, gamma, beta, eps=1e-5):
    """Training-mode batch normalisation over rows. Returns (output, batch mean, batch var)."""
    x = a.data
    if x.ndim != 2 or gamma.shape != (x.shape[1],):
        raise ShapeError("batch_norm", a.shape, gamma.shape)
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    n = x.shape[0]

    def backward(g):
        gamma._accum((g * xhat).sum(axis=0))
        beta._accum(g.sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            a._accum(inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)))

    out = _node(xhat * gamma.data + beta.data, (a, gamma, beta), "batch_norm", backward)
    return out, mu, var
