"""Differentiable operations over :class:`Tensor`.

Ops accept leading batch dimensions where noted; elementwise binary ops follow
numpy broadcasting and reduce gradients back to each operand's shape.
"""
import numpy as np

from .. import _kernels
from ..errors import DimensionError, DomainError
from .tensor import Tensor, as_tensor


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")

    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, parents=(a, b), op="add", backward=back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")

    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.data - b.data, parents=(a, b), op="sub", backward=back)


def mul(a, b):
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, parents=(a, b), op="elementwise-product", backward=back)


def neg(x):
    return scale(x, -1.0)


def scale(x, c):
    c = float(c)

    def back(g):
        x.accumulate(g * c)

    return Tensor(x.data * c, parents=(x,), op="scale", backward=back)


def affine(x, W, b=None):
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (out, in)."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        if x.requires_grad:
            x.accumulate(g @ W.data)
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            W.accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    return Tensor(out, parents=parents, op="affine", backward=back)


def conv1d(seq, kernels, bias):
    """Same-length 1-D convolution with symmetric zero padding.

    ``seq`` is (N, d_in) or (B, N, d_in); ``kernels`` is (w, d_in, d_out)
    with odd ``w``.  No activation is applied.
    """
    seq = as_tensor(seq)
    squeeze = seq.ndim == 2
    x = seq.data[None] if squeeze else seq.data
    if x.ndim != 3 or x.shape[1] == 0:
        raise DomainError("conv1d needs a non-empty (B, N, d_in) sequence")
    w, din, dout = kernels.shape
    if w % 2 == 0:
        raise DomainError(f"conv1d window must be odd, got {w}")
    if x.shape[2] != din or bias.shape != (dout,):
        raise DimensionError(f"conv1d: seq {seq.shape}, kernels {kernels.shape}, bias {bias.shape}")
    B, N, _ = x.shape
    p = (w - 1) // 2
    padded = np.zeros((B, N + 2 * p, din))
    padded[:, p:p + N] = x
    cols = np.stack([padded[:, j:j + N] for j in range(w)], axis=2).reshape(B * N, w * din)
    kmat = kernels.data.reshape(w * din, dout)
    out = (cols @ kmat + bias.data).reshape(B, N, dout)

    def back(g):
        gf = g.reshape(B * N, dout)
        if kernels.requires_grad:
            kernels.accumulate((cols.T @ gf).reshape(w, din, dout))
        if bias.requires_grad:
            bias.accumulate(gf.sum(axis=0))
        if seq.requires_grad:
            dcols = (gf @ kmat.T).reshape(B, N, w, din)
            dpad = np.zeros_like(padded)
            for j in range(w):
                dpad[:, j:j + N] += dcols[:, :, j]
            dx = dpad[:, p:p + N]
            seq.accumulate(dx[0] if squeeze else dx)

    return Tensor(out[0] if squeeze else out, parents=(seq, kernels, bias), op="conv1d", backward=back)


def relu(x):
    mask = x.data > 0

    def back(g):
        x.accumulate(g * mask)

    # np.maximum keeps NaN, so divergence upstream is not masked
    return Tensor(np.maximum(x.data, 0.0), parents=(x,), op="relu", backward=back)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_sigmoid(z):
    # -softplus(-z), branch-stable for large |z|
    return -(np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z))))


def sigmoid(x):
    s = _sigmoid(x.data)

    def back(g):
        x.accumulate(g * s * (1.0 - s))

    return Tensor(s, parents=(x,), op="sigmoid", backward=back)


def log_sigmoid(x):
    def back(g):
        x.accumulate(g * _sigmoid(-x.data))

    return Tensor(_log_sigmoid(x.data), parents=(x,), op="log_sigmoid", backward=back)


def _masked_softmax(s, mask):
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x, mask=None):
    """Softmax over the last axis; ``mask`` (broadcastable bool) excludes entries."""
    p = _masked_softmax(x.data, mask)

    def back(g):
        x.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return Tensor(p, parents=(x,), op="softmax", backward=back)


def log_softmax(x):
    """Log of the softmax over the last axis, without forming tiny probabilities."""
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse

    def back(g):
        x.accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return Tensor(out, parents=(x,), op="softmax", backward=back)


def attention_pool(items, queries, mask=None):
    """Multi-query attentive pooling.

    items (B, N, d), queries (K, d), mask (B, N) bool.  Returns pooled
    (B, K, d) and the attention weights (B, K, N) as a plain array.
    """
    X = items.data
    Q = queries.data
    if X.ndim != 3 or Q.ndim != 2 or X.shape[2] != Q.shape[1]:
        raise DimensionError(f"attention_pool: items {X.shape}, queries {Q.shape}")
    B, N, d = X.shape
    if N == 0:
        raise DomainError("attention over an empty sequence")
    K = Q.shape[0]
    s = (X @ Q.T).transpose(0, 2, 1)
    alpha = _masked_softmax(s, None if mask is None else mask[:, None, :])
    pooled = alpha @ X

    def back(g):
        dalpha = g @ X.transpose(0, 2, 1)
        ds = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
        if items.requires_grad:
            items.accumulate(alpha.transpose(0, 2, 1) @ g + ds.transpose(0, 2, 1) @ Q)
        if queries.requires_grad:
            queries.accumulate(ds.transpose(1, 0, 2).reshape(K, B * N) @ X.reshape(B * N, d))

    out = Tensor(pooled, parents=(items, queries), op="softmax", backward=back)
    return out, alpha


def softmax_attention(items, query, mask=None):
    """Attention of ``query`` over the rows of ``items``.

    With items (N, d) and query (d,) returns weights (N,) and pooled (d,);
    a leading batch axis on ``items`` is carried through.
    """
    items = as_tensor(items)
    query = as_tensor(query)
    unbatched = items.ndim == 2
    if unbatched:
        items = reshape(items, (1,) + items.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    if query.ndim != 1:
        raise DimensionError(f"softmax_attention takes a single query vector, got {query.shape}")
    pooled, alpha = attention_pool(items, reshape(query, (1, query.shape[0])), mask)
    pooled = reshape(pooled, (pooled.shape[0], pooled.shape[2]))
    weights = alpha[:, 0, :]
    if unbatched:
        return Tensor(weights[0]), reshape(pooled, (pooled.shape[1],))
    return Tensor(weights), pooled


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t.accumulate(piece)

    return Tensor(out, parents=tuple(tensors), op="concat", backward=back)


def sum(x, axis=None):
    if axis is None:
        def back(g):
            x.accumulate(np.broadcast_to(g.reshape(()), x.shape).copy())
        return Tensor(np.sum(x.data).reshape(1), parents=(x,), op="sum", backward=back)

    def back(g):
        x.accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return Tensor(np.sum(x.data, axis=axis), parents=(x,), op="sum", backward=back)


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")

    def back(g):
        x.accumulate(g / x.data)

    return Tensor(np.log(x.data), parents=(x,), op="log", backward=back)


def clamp(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        x.accumulate(g * inside)

    return Tensor(np.clip(x.data, lo, hi), parents=(x,), op="clamp", backward=back)


def cosine(a, b, eps=0.0):
    """Cosine similarity along the last axis (leading axes broadcast).

    ``eps > 0`` adds to the squared norms, making zero vectors legal.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine: {a.shape} vs {b.shape}")
    _binary_shape(a, b, "cosine")
    na = np.sqrt(np.sum(a.data * a.data, axis=-1) + eps)
    nb = np.sqrt(np.sum(b.data * b.data, axis=-1) + eps)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("cosine similarity of a zero vector")
    dot = np.sum(a.data * b.data, axis=-1)
    c = dot / (na * nb)

    def back(g):
        g = g[..., None]
        if a.requires_grad:
            ga = g * (b.data / (na * nb)[..., None] - (c / na ** 2)[..., None] * a.data)
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = g * (a.data / (na * nb)[..., None] - (c / nb ** 2)[..., None] * b.data)
            b.accumulate(_unbroadcast(gb, b.shape))

    return Tensor(c, parents=(a, b), op="cosine", backward=back)


def euclidean_norm(x):
    """L2 norm along the last axis; the gradient at the origin is taken as 0."""
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        x.accumulate(np.where((n > 0)[..., None], x.data * (g / safe)[..., None], 0.0))

    return Tensor(n, parents=(x,), op="euclidean-norm", backward=back)


def normalize(x):
    """Rows scaled to unit L2 norm along the last axis; zero rows raise."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(n == 0):
        raise DomainError("cannot normalize a zero vector")
    y = x.data / n

    def back(g):
        x.accumulate((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n)

    return Tensor(y, parents=(x,), op="normalize", backward=back)


def lookup(table, idx):
    """Rows of a 2-D ``table`` at integer ``idx`` (any shape)."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"lookup needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"lookup index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        _kernels.scatter_add_rows(gt, idx.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[1])))
        table.accumulate(gt)

    return Tensor(out, parents=(table,), op="lookup", backward=back)


def reshape(x, shape):
    old = x.shape

    def back(g):
        x.accumulate(g.reshape(old))

    return Tensor(x.data.reshape(shape), parents=(x,), op="reshape", backward=back)
