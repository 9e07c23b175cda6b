"""Bipartite matching of queries to ground truth and the training objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import mechanisms
from .model import DecoderTrace, ModelConfig
from .numcore import Tensor, abs_, gather, maximum, minimum, relu, softplus
from .synthgen import Span, VideoSample, frame_mask

# -- generalized IoU -----------------------------------------------------------

_TINY = 1e-12


def giou_1d(a: Span | Sequence[float], b: Span | Sequence[float]) -> float:
    """Generalized IoU of two intervals, in [-1, 1].

    A zero-length interval is a point: it has zero intersection and IoU 0
    even when it lies inside the other interval. Two coincident points give 0.
    """
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    hull = max(a[1], b[1]) - min(a[0], b[0])
    iou = inter / union if union > 0 else 0.0
    slack = (hull - union) / hull if hull > 0 else 0.0
    return iou - slack


def giou_tensor(start: Tensor, end: Tensor, gt_start, gt_end) -> tuple[Tensor, Tensor]:
    """Elementwise (giou, iou) of predicted intervals against fixed targets."""
    gs = np.asarray(gt_start, dtype=np.float64)
    ge = np.asarray(gt_end, dtype=np.float64)
    inter = relu(minimum(end, ge) - maximum(start, gs))
    union = (end - start) + (ge - gs) - inter
    hull = maximum(end, ge) - minimum(start, gs)
    iou = inter / maximum(union, _TINY)
    return iou - (hull - union) / maximum(hull, _TINY), iou


def _iou_np(ps, pe, gs, ge) -> np.ndarray:
    inter = np.maximum(0.0, np.minimum(pe, ge) - np.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _giou_np(ps, pe, gs, ge) -> np.ndarray:
    inter = np.maximum(0.0, np.minimum(pe, ge) - np.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    hull = np.maximum(pe, ge) - np.minimum(ps, gs)
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    slack = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return iou - slack


# -- matching ---------------------------------------------------------------------

@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (gt_index, query_index), sorted by gt
    total_cost: float

    def query_of(self) -> dict[int, int]:
        return dict(self.pairs)


def matching_cost(spans, p_cls, gts, mu_l1: float = 10.0, mu_giou: float = 1.0,
                  mu_cls: float = 4.0) -> np.ndarray:
    """Cost matrix of shape (#GT, M) on detached predictions."""
    b = np.asarray(spans.data if isinstance(spans, Tensor) else spans, dtype=np.float64).reshape(-1, 2)
    pc = np.asarray(p_cls.data if isinstance(p_cls, Tensor) else p_cls, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(g) == 0:
        raise ValueError("matching needs at least one ground-truth span")
    ps, pe = b[None, :, 0], b[None, :, 1]
    gs, ge = g[:, None, 0], g[:, None, 1]
    l1 = np.abs(ps - gs) + np.abs(pe - ge)
    giou = _giou_np(ps, pe, gs, ge)
    return mu_l1 * l1 + mu_giou * (1.0 - giou) + mu_cls * (1.0 - pc[None, :])


def _solve(cost: np.ndarray) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian method for K <= M.

    Returns the column of each row plus the row and column potentials
    (``u[i] + v[j] <= cost[i, j]``, tight on the assignment, ``v <= 0``).
    """
    k, m = cost.shape
    u = np.zeros(k + 1)
    v = np.zeros(m + 1)
    owner = np.full(m + 1, -1, dtype=int)  # owner[j]: row matched to column j; column m is the root
    way = np.zeros(m + 1, dtype=int)
    for row in range(k):
        owner[m] = row
        j0 = m
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[:m]
            cur = cost[i0] - u[i0] - v[:m]
            better = free & (cur < minv[:m])
            minv[:m] = np.where(better, cur, minv[:m])
            way[:m] = np.where(better, j0, way[:m])
            cand = np.where(free, minv[:m], np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            rows = owner[used]
            u[rows] += delta
            v[used] -= delta
            minv[:m] = np.where(free, minv[:m] - delta, minv[:m])
            j0 = j1
            if owner[j0] == -1:
                break
        while j0 != m:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = [-1] * k
    for j in range(m):
        if owner[j] >= 0:
            assign[owner[j]] = j
    return assign, u[:k], v[:m]


def _total(cost: np.ndarray, assign: Sequence[int]) -> float:
    total = 0.0
    for g, q in enumerate(assign):
        total += float(cost[g, q])
    return total


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost injective assignment of rows (GTs) to columns (queries).

    Among equal-cost optima the lexicographically smallest list of
    ``(gt, query)`` pairs wins: each row in turn is offered lower-numbered
    tight columns and keeps one only if the rest can still reach the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    k, m = cost.shape
    if k > m:
        raise ValueError(f"more targets ({k}) than queries ({m})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite values")
    if k == 0:
        return MatchResult([], 0.0)
    assign, u, v = _solve(cost)
    best = _total(cost, assign)
    tol = 1e-9 * max(1.0, abs(best))
    reduced = cost - u[:, None] - v[None, :]
    fixed: list[int] = []
    for g in range(k):
        for q in np.flatnonzero(reduced[g] <= tol):
            q = int(q)
            if q >= assign[g]:
                break
            if q in fixed:
                continue
            rest_rows = list(range(g + 1, k))
            rest_cols = [j for j in range(m) if j != q and j not in fixed]
            if rest_rows:
                sub_assign, _, _ = _solve(cost[np.ix_(rest_rows, rest_cols)])
                tail = [rest_cols[j] for j in sub_assign]
            else:
                tail = []
            candidate = fixed + [q] + tail
            if abs(_total(cost, candidate) - best) <= tol:
                assign = candidate
                break
        fixed.append(assign[g])
    return MatchResult([(g, int(q)) for g, q in enumerate(assign)], _total(cost, assign))


# -- losses ------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l1: float
    giou: float
    cls: float
    saliency: float
    bridge: float
    iou: float
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    TERMS = ("l1", "giou", "cls", "saliency", "bridge", "iou")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.TERMS + ("total",)}


def match_layers(trace: DecoderTrace, samples: Sequence[VideoSample], cfg: ModelConfig) -> list[list[MatchResult]]:
    """Hungarian match at every decoder layer, per sample; also stored on the trace."""
    out = []
    for lt in trace.layers:
        spans = lt.spans
        pc = lt.heads.p_cls.data
        per_layer = []
        for b, sample in enumerate(samples):
            cost = matching_cost(spans[b], pc[b], sample.gt_array(), cfg.mu_l1, cfg.mu_giou, cfg.mu_cls)
            per_layer.append(hungarian_match(cost))
        out.append(per_layer)
    trace.matches = out
    return out


def total_loss(trace: DecoderTrace, samples: VideoSample | Sequence[VideoSample],
               cfg: ModelConfig) -> LossBreakdown:
    """Weighted training loss averaged over the batch and over decoder layers.

    Per sample and layer: span L1 and (1 - gIoU) over matched pairs, weighted
    binary cross-entropy over all queries, bridging loss for matched queries
    (when enabled) and L1 between the IoU head and the detached IoU of the
    matched prediction. The saliency hinge is computed once per sample.
    """
    samples = [samples] if isinstance(samples, VideoSample) else list(samples)
    if len(samples) != trace.batch_size:
        raise ValueError(f"{len(samples)} samples for a trace of batch {trace.batch_size}")
    for s in samples:
        if not s.gt_spans:
            raise ValueError(f"sample {s.id} has no ground-truth spans")
    bsz = len(samples)
    n_layers = len(trace.layers)
    m = trace.layers[0].heads.p_cls.shape[-1]
    n_frames = trace.memory.shape[1]
    matches = match_layers(trace, samples, cfg)
    use_bridge = cfg.enable_glb

    # pairs are identical in layout across layers except for the query index
    bidx = np.concatenate([np.full(len(s.gt_spans), b) for b, s in enumerate(samples)])
    gt = np.concatenate([s.gt_array() for s in samples])
    w_pair = np.concatenate([np.full(len(s.gt_spans), 1.0 / len(s.gt_spans)) for s in samples]) / bsz
    masks = np.stack([frame_mask(g, n_frames) for g in gt]) if use_bridge else None

    sums = dict.fromkeys(LossBreakdown.TERMS, 0.0)
    graph: dict[str, Tensor | float] = dict.fromkeys(LossBreakdown.TERMS, 0.0)

    for layer, lt in enumerate(trace.layers):
        qidx = np.concatenate([[q for _, q in matches[layer][b].pairs] for b in range(bsz)])
        heads = lt.heads
        ps = gather(heads.start, (bidx, qidx))
        pe = gather(heads.end, (bidx, qidx))
        l1 = ((abs_(ps - gt[:, 0]) + abs_(pe - gt[:, 1])) * w_pair).sum()
        giou, _ = giou_tensor(ps, pe, gt[:, 0], gt[:, 1])
        giou_loss = ((1.0 - giou) * w_pair).sum()

        target = np.zeros((bsz, m))
        target[bidx, qidx] = 1.0
        weight = np.where(target > 0, 1.0, cfg.background_weight)
        weight = weight / weight.sum(axis=1, keepdims=True) / bsz
        logit = heads.cls_logit
        bce = softplus(logit) * (1.0 - target) + softplus(-logit) * target
        cls = (bce * weight).sum()

        iou_target = _iou_np(ps.data, pe.data, gt[:, 0], gt[:, 1])
        iou_loss = (abs_(gather(heads.p_iou, (bidx, qidx)) - iou_target) * w_pair).sum()

        terms = {"l1": l1, "giou": giou_loss, "cls": cls, "iou": iou_loss}
        if use_bridge:
            q = gather(lt.queries, (bidx, qidx))
            mem = gather(trace.memory, bidx)
            terms["bridge"] = (mechanisms.bridge_loss_batch(q, mem, masks, trace.tau) * w_pair).sum()
        for name, t in terms.items():
            sums[name] += t.item() / n_layers
            graph[name] = graph[name] + t * (1.0 / n_layers)

    sal_mask = np.stack([s.saliency for s in samples])
    sal = trace.saliency
    n_in = sal_mask.sum(1)
    n_out = (1.0 - sal_mask).sum(1)
    mean_in = (sal * sal_mask).sum(axis=1) * (1.0 / np.maximum(n_in, 1.0))
    mean_out = (sal * (1.0 - sal_mask)).sum(axis=1) * (1.0 / np.maximum(n_out, 1.0))
    sal_loss = relu(cfg.saliency_margin - (mean_in - mean_out)).mean()
    sums["saliency"] = sal_loss.item()
    graph["saliency"] = sal_loss

    weights = {"l1": cfg.lambda_l1, "giou": cfg.lambda_giou, "cls": cfg.lambda_cls,
               "saliency": cfg.lambda_saliency, "bridge": cfg.lambda_bridge if use_bridge else 0.0,
               "iou": cfg.lambda_iou}
    objective: Tensor | float = 0.0
    total = 0.0
    for name in LossBreakdown.TERMS:
        if weights[name] == 0:
            continue
        objective = objective + graph[name] * weights[name]
        total += weights[name] * sums[name]
    if not isinstance(objective, Tensor):
        objective = Tensor(0.0)
    return LossBreakdown(**sums, total=total, objective=objective)
