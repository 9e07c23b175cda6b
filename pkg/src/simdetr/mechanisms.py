"""Query grouping and ranking, and the query-to-frame bridging loss.

The grouping/ranking inputs (spans and scores from the previous decoder
layer) are plain arrays: they shape attention but are never differentiated.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .numcore import Tensor, cosine_sim, matmul, relu, sigmoid, softmax
from .synthgen import Span, frame_mask


def _detached(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def span_border_distance(spans) -> np.ndarray:
    """Pairwise Euclidean distance between (start, end) points.

    ``spans`` has shape ``(..., M, 2)``; the result is ``(..., M, M)``.
    """
    b = _detached(spans)
    diff = b[..., :, None, :] - b[..., None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def rank_relation(p_cls, p_iou) -> np.ndarray:
    """+1 where query i's cls*iou product is >= query j's, else -1."""
    prod = _detached(p_cls) * _detached(p_iou)
    return np.where(prod[..., :, None] >= prod[..., None, :], 1.0, -1.0)


def attention_modulation(s_intra, rank, mlp: Mapping[str, Tensor]) -> Tensor:
    """sigmoid(MLP(s_intra * rank)) with a scalar MLP shared over all pairs.

    ``mlp`` holds ``w1 (1, H)``, ``b1 (H,)``, ``w2 (H, 1)``, ``b2 (1,)``.
    """
    x = Tensor((_detached(s_intra) * _detached(rank))[..., None])
    h = relu(matmul(x, mlp["w1"]) + mlp["b1"])
    out = matmul(h, mlp["w2"]) + mlp["b2"]
    return sigmoid(out.reshape(out.shape[:-1]))


def _linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def modulated_self_attention(q: Tensor, s_attn: Tensor | None,
                             params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Query self-attention whose pre-softmax logits are scaled by ``s_attn``.

    ``params`` holds the ``q``, ``k``, ``v`` and ``o`` projections. Returns the
    projected output and the row-stochastic attention matrix.
    """
    c = q.shape[-1]
    qq = _linear(q, params, "q")
    qk = _linear(q, params, "k")
    qv = _linear(q, params, "v")
    logits = matmul(qq, qk.T) * (1.0 / np.sqrt(c))
    if s_attn is not None:
        logits = logits * s_attn
    attn = softmax(logits, axis=-1)
    return _linear(matmul(attn, qv), params, "o"), attn


def bridge_ratio(z, mask) -> Tensor:
    """-(sum z*I) / (sum z*(1-I) + sum I) over the last axis."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    mask = np.asarray(mask, dtype=np.float64)
    inside = mask.sum(-1)
    if np.any(inside <= 0):
        raise ValueError("ground-truth span covers no frame")
    num = (z * mask).sum(axis=-1)
    den = (z * (1.0 - mask)).sum(axis=-1) + inside
    return -num / den


def bridge_loss_batch(q: Tensor, memory: Tensor, masks: np.ndarray, tau: Tensor) -> Tensor:
    """Per-pair bridging loss for ``q (P, C)`` against ``memory (P, N, C)``."""
    cos = cosine_sim(q.reshape(q.shape[0], 1, q.shape[1]), memory)
    z = sigmoid(cos * tau)
    return bridge_ratio(z, masks)


def bridge_loss(q: Tensor, memory: Tensor, gt: Span | Sequence[float], tau) -> Tensor:
    """Bridging loss of one query against all frames, unweighted, in [-1, 0]."""
    tau = tau if isinstance(tau, Tensor) else Tensor(tau)
    if np.any(tau.data <= 0):
        raise ValueError("tau must be positive")
    mask = frame_mask(gt, memory.shape[0])
    cos = cosine_sim(q.reshape(1, q.shape[-1]), memory)
    return bridge_ratio(sigmoid(cos * tau), mask)
