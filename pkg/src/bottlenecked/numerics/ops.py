"""Primitive operations with their backward rules.

Broadcasting is restricted on purpose: two operands of an elementwise op must
either share a shape or one shape must be a trailing suffix of the other
(broadcast over leading batch dimensions). Anything else raises.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import NumericsError, Tensor, as_tensor, make_result

__all__ = [
    "matmul", "add", "sub", "mul", "scale", "sum", "mean", "softmax", "rms_norm",
    "silu", "gelu", "sigmoid", "concat", "index", "take", "scatter_add", "reshape",
    "transpose", "swap_last", "embedding", "cross_entropy", "rotary", "stop_gradient",
]


def _check_dtype(op: str, *ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise NumericsError(f"{op}: dtype mismatch {dt} vs {t.dtype}")


def _suffix_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise NumericsError(f"{op}: shape mismatch {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g.reshape(shape)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` and either ``b[k, n]`` or ``b[..., k, n]``
    with the same leading dimensions as ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise NumericsError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.ndim != b.ndim:
        raise NumericsError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                k, n = B.shape
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return make_result("matmul", out, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_dtype("add", a, b)
    _suffix_broadcast("add", a, b)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_dtype("sub", a, b)
    _suffix_broadcast("sub", a, b)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_dtype("mul", a, b)
    _suffix_broadcast("mul", a, b)
    A, B = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * B, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", A * B, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)
    out = np.asarray(out, dtype=a.dtype)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_result("sum", out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(n))


# -- normalisation and pointwise nonlinearities -----------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, True = keep) must have a
    shape that is a suffix of ``x.shape``; masked entries get probability 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if x.shape[x.ndim - mask.ndim:] != mask.shape:
            raise NumericsError(f"softmax: mask shape {mask.shape} vs input {x.shape}")
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericsError("softmax: a row is fully masked")
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", p, (x,), back)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row (last axis) to unit root-mean-square. No learned weight."""
    x = as_tensor(x)
    X = x.data
    d = X.shape[-1]
    r = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    y = X * r

    def back(g):
        dot = (g * X).sum(axis=-1, keepdims=True)
        return (r * g - (r ** 3) * X * dot / d,)

    return make_result("rms_norm", y, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _logistic(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def _logistic(z: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |z| and avoids masked indexing
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    X = x.data
    s = _logistic(X)
    return make_result("silu", X * s, (x,), lambda g: (g * (s + X * s * (1 - s)),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    X = x.data
    c = math.sqrt(2.0 / math.pi)
    u = c * (X + 0.044715 * X ** 3)
    t = np.tanh(u)
    y = 0.5 * X * (1 + t)

    def back(g):
        du = c * (1 + 3 * 0.044715 * X ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * X * (1 - t * t) * du),)

    return make_result("gelu", y, (x,), back)


# -- structural ops ----------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("concat: nothing to concatenate")
    _check_dtype("concat", *ts)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise NumericsError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return make_result("concat", out, ts, back)


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced numpy indexing; gradient scatters back with add."""
    x = as_tensor(x)
    out = x.data[key]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result("index", np.array(out, copy=True), (x,), back)


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather rows (or slices along ``axis``) by integer index."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise NumericsError(f"take: index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_result("take", out, (x,), back)


def scatter_add(base: Tensor, idx, src: Tensor, axis: int = 0) -> Tensor:
    """Return ``base`` with ``src`` added at positions ``idx`` along ``axis``.

    Indices must be unique. ``base`` itself is left untouched.
    """
    base, src = as_tensor(base), as_tensor(src)
    _check_dtype("scatter_add", base, src)
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != idx.size:
        raise NumericsError("scatter_add: duplicate indices")
    n = base.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise NumericsError(f"scatter_add: index out of range for axis of size {n}")
    expect = base.shape[:axis] + (idx.size,) + base.shape[axis + 1:]
    if src.shape != expect:
        raise NumericsError(f"scatter_add: shape mismatch {src.shape} vs {expect}")
    out = base.data.copy()
    moved = np.moveaxis(out, axis, 0)
    moved[idx] += np.moveaxis(src.data, axis, 0)

    def back(g):
        return g, np.take(g, idx, axis=axis)

    return make_result("scatter_add", out, (base, src), back)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise NumericsError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(
        "transpose", out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),)
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise NumericsError(f"embedding: token id out of range [0, {V})")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result("embedding", out, (table,), back)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over positions (nats).

    ``logits`` is ``[..., V]``; ``targets`` matches the leading shape.
    ``weights`` (same shape as ``targets``) defaults to all ones.
    """
    logits = as_tensor(logits)
    Z = logits.data
    V = Z.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != Z.shape[:-1]:
        raise NumericsError(f"cross_entropy: targets {targets.shape} vs logits {Z.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise NumericsError("cross_entropy: target id out of range")
    w = np.ones(targets.shape, dtype=Z.dtype) if weights is None else np.asarray(weights, Z.dtype)
    total = w.sum()
    if total <= 0:
        raise NumericsError("cross_entropy: no positions carry weight")
    m = Z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(Z - m).sum(axis=-1))
    picked = np.take_along_axis(Z, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(((lse - picked) * w).sum() / total, dtype=Z.dtype)

    def back(g):
        p = np.exp(Z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1, -1)
        return (p * (w / total)[..., None] * g,)

    return make_result("cross_entropy", loss, (logits,), back)


def rotary(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position encoding on ``x[..., T, H, d]`` (d even), half-split pairing."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise NumericsError(f"rotary: head dim {d} must be even")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-3],):
        raise NumericsError(f"rotary: positions {pos.shape} vs sequence axis of {x.shape}")
    half = d // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = pos[:, None] * inv[None, :]
    cos = np.cos(ang).astype(x.dtype)[:, None, :]
    sin = np.sin(ang).astype(x.dtype)[:, None, :]

    def rot(a, s):
        a1, a2 = a[..., :half], a[..., half:]
        return np.concatenate([a1 * cos - a2 * s, a2 * cos + a1 * s], axis=-1)

    return make_result("rotary", rot(x.data, sin), (x,), lambda g: (rot(g, -sin),))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow to ``x``."""
    x = as_tensor(x)
    return Tensor(x.data, dtype=x.dtype)
