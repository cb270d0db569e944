"""Differentiable ops used by the sequence models.

All functions accept Tensors (or anything `ensure_tensor` takes) and return
Tensors on the tape. Reductions happen over the last axis unless stated;
batched inputs are supported throughout.
"""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Array, Tensor, ensure_tensor

logger = logging.getLogger(__name__)

NEG_INF = -np.inf


def softmax_temp(logits, gamma: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-smoothed softmax, computed with max-subtraction.

    gamma > 1 flattens the distribution, gamma < 1 sharpens it. The argmax
    is invariant in gamma.
    """
    if not gamma > 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    x = ensure_tensor(logits)
    if not np.all(np.isfinite(x.data) | (x.data == NEG_INF)):
        raise ValueError("logits must be finite (or -inf for masked entries)")
    shift = np.max(x.data, axis=axis, keepdims=True)
    scaled = np.exp((x.data - shift) / gamma)
    out_data = scaled / scaled.sum(axis=axis, keepdims=True)

    def back(g: Array) -> None:
        inner = (g - (g * out_data).sum(axis=axis, keepdims=True)) * out_data
        x._accumulate(inner / gamma)

    return Tensor._node(out_data, (x,), back)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = ensure_tensor(logits)
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - shift
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    soft = np.exp(out_data)

    def back(g: Array) -> None:
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._node(out_data, (x,), back)


def kl_divergence(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) = sum_i p_i * ln(p_i / q_i), with 0·ln(0/q) = 0.

    `p` and `q` are probability vectors (or batches thereof); the reduction
    runs over `axis`. Differentiable in both arguments away from p_i = 0.
    """
    p = ensure_tensor(p)
    q = ensure_tensor(q)
    if p.data.shape != q.data.shape:
        raise ValueError(
            f"distribution shape mismatch: {p.data.shape} vs {q.data.shape}"
        )
    pos = p.data > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_log = np.where(pos, np.log(p.data) - np.log(q.data), 0.0)
    out_data = (np.where(pos, p.data, 0.0) * ratio_log).sum(axis=axis)

    def back(g: Array) -> None:
        g_full = np.expand_dims(g, axis) if np.ndim(g) != p.data.ndim else g
        p._accumulate(g_full * np.where(pos, ratio_log + 1.0, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = np.where(pos, -p.data / q.data, 0.0)
        q._accumulate(g_full * dq)

    return Tensor._node(out_data, (p, q), back)


def gather_last(x, index: Array) -> Tensor:
    """Pick entries along the last axis: out[..., j] = x[..., index[..., j]]."""
    x = ensure_tensor(x)
    index = np.asarray(index)
    out_data = np.take_along_axis(x.data, index, axis=-1)

    def back(g: Array) -> None:
        if not x.requires_grad:
            return
        scatter = np.zeros_like(x.data)
        mesh = np.ogrid[tuple(slice(n) for n in index.shape)]
        np.add.at(scatter, tuple(mesh[:-1]) + (index,), g)
        x._accumulate(scatter)

    return Tensor._node(out_data, (x,), back)


def cross_entropy(logits, targets: Array, weights: Array | None = None, reduce: str = "mean") -> Tensor:
    """Cross-entropy of integer targets under `logits` over the last axis.

    `weights` optionally scales each example's loss by the weight of its
    target class (the class-imbalance convention: a zero weight silences the
    example and is logged once per call).
    """
    x = ensure_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != x.data.shape[:-1]:
        raise ValueError(
            f"target shape {targets.shape} does not match logits {x.data.shape}"
        )
    if np.any(targets < 0) or np.any(targets >= x.data.shape[-1]):
        raise ValueError("target id out of range")
    logp = log_softmax(x)
    picked = gather_last(logp, targets[..., None])
    nll = -picked.reshape(targets.shape) if targets.shape else -picked.reshape(())
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        w = weights[targets]
        if np.any(w == 0):
            logger.warning(
                "cross_entropy: %d target(s) have zero class weight; their loss is 0",
                int(np.sum(w == 0)),
            )
        nll = nll * w
    if reduce == "mean":
        return nll.mean()
    if reduce == "sum":
        return nll.sum()
    if reduce == "none":
        return nll
    raise ValueError(f"unknown reduction {reduce!r}")


def weighted_cross_entropy(logits, target_id: int, weights) -> Tensor:
    """-w[target] * ln softmax(logits)[target] for a single logit vector."""
    x = ensure_tensor(logits)
    if x.data.ndim != 1:
        raise ValueError("weighted_cross_entropy expects a single logit vector")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != x.data.shape[0]:
        raise ValueError("weights length must equal the class count")
    return cross_entropy(
        x.reshape(1, -1), np.array([target_id]), weights=weights, reduce="sum"
    )


def mse(pred, target) -> Tensor:
    """Mean over leading axes of the squared L2 distance along the last axis."""
    pred = ensure_tensor(pred)
    target = ensure_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred - target
    sq = (diff * diff).sum(axis=-1)
    return sq.mean() if sq.data.ndim > 0 else sq


def affine(x, w, b) -> Tensor:
    """x @ w + b over the last axis of x."""
    x = ensure_tensor(x)
    flat = x.data.ndim == 1
    if flat:
        x = x.reshape(1, -1)
    out = x @ w + b
    return out.reshape(out.data.shape[-1]) if flat else out


def embedding(table, ids: Array) -> Tensor:
    """Row lookup into an embedding table, differentiable w.r.t. the table."""
    table = ensure_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.data.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.data.shape[0])][0]
        raise ValueError(
            f"token id {int(bad)} out of range for table of {table.data.shape[0]} rows"
        )
    out_data = table.data[ids]

    def back(g: Array) -> None:
        if not table.requires_grad:
            return
        scatter = np.zeros_like(table.data)
        np.add.at(scatter, ids, g)
        table._accumulate(scatter)

    return Tensor._node(out_data, (table,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x = ensure_tensor(x)
    gain = ensure_tensor(gain)
    bias = ensure_tensor(bias)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = gain.data * xhat + bias.data

    def back(g: Array) -> None:
        reduce_axes = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=reduce_axes))
        bias._accumulate(g.sum(axis=reduce_axes))
        dxhat = g * gain.data
        x._accumulate(
            inv_std
            * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        )

    return Tensor._node(out_data, (x, gain, bias), back)


def sdp_attention(q, k, v, mask: Array | None = None) -> Tensor:
    """Scaled dot-product attention with an optional additive mask.

    q, k, v: (..., length, dim). `mask` broadcasts against the score matrix
    (..., len_q, len_k); masked entries carry -inf.
    """
    q = ensure_tensor(q)
    k = ensure_tensor(k)
    v = ensure_tensor(v)
    dim = q.data.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dim))
    if mask is not None:
        scores = scores + Tensor(mask)
    return softmax_temp(scores, 1.0) @ v


def causal_mask(length: int) -> Array:
    """Additive mask hiding positions j > i from position i."""
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = NEG_INF
    return mask


def padding_mask(tokens: Array, pad_id: int) -> Array:
    """Additive (batch, 1, 1, length) mask hiding PAD keys from attention."""
    blocked = np.where(tokens == pad_id, NEG_INF, 0.0)
    return blocked[:, None, None, :]


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when rate is 0 or not training."""
    x = ensure_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)
