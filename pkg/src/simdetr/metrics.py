"""Top-1 recall, mAP over IoU thresholds and mean IoU for span predictions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelConfig, forward, shape_batches
from .numcore import no_grad
from .synthgen import Span, VideoSample

R1_THRESHOLDS = (0.5, 0.7)
MAP_THRESHOLDS = (0.5, 0.75)
MAP_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def temporal_iou(a: Span | Sequence[float], b: Span | Sequence[float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class Prediction:
    start: float
    end: float
    score: float


def rank_predictions(preds: Sequence[Prediction]) -> list[Prediction]:
    """Score descending; equal scores keep the earlier start first."""
    return sorted(preds, key=lambda p: (-p.score, p.start))


def recall_at(top1: Sequence[Span], gts: Sequence[Sequence[Span]], threshold: float) -> float:
    if not top1:
        raise ValueError("recall over an empty corpus")
    hits = sum(any(temporal_iou(p, g) >= threshold for g in gt) for p, gt in zip(top1, gts))
    return hits / len(top1)


def average_precision(preds: Sequence[Prediction], gts: Sequence[Span], threshold: float) -> float:
    """Non-interpolated AP of one ranked prediction list against one sample's GTs.

    Each prediction claims the highest-IoU unclaimed GT whose IoU reaches the
    threshold; AP sums the precision at every true positive over #GT.
    """
    if not gts:
        raise ValueError("average precision needs at least one ground-truth span")
    claimed = [False] * len(gts)
    tp = 0
    acc = 0.0
    for k, p in enumerate(rank_predictions(preds), start=1):
        ious = [temporal_iou((p.start, p.end), g) for g in gts]
        for g in sorted(range(len(gts)), key=lambda i: -ious[i]):
            if ious[g] < threshold:
                break
            if not claimed[g]:
                claimed[g] = True
                tp += 1
                acc += tp / k
                break
    return acc / len(gts)


@dataclass
class MetricsReport:
    r1: dict[float, float]
    map_at: dict[float, float]
    map_avg: float
    miou: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "r1": {str(k): v for k, v in self.r1.items()},
            "map": {str(k): v for k, v in self.map_at.items()},
            "map_avg": self.map_avg,
            "miou": self.miou,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> MetricsReport:
        return cls({float(k): float(v) for k, v in obj["r1"].items()},
                   {float(k): float(v) for k, v in obj["map"].items()},
                   float(obj["map_avg"]), float(obj["miou"]), int(obj["n_samples"]))


def compute_report(predictions: Sequence[Sequence[Prediction]],
                   gts: Sequence[Sequence[Span]]) -> MetricsReport:
    """Metrics over a corpus: per-sample AP averaged over samples, per threshold."""
    if not predictions:
        raise ValueError("cannot evaluate an empty corpus")
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truth differ in length")
    top1 = []
    for preds in predictions:
        if not preds:
            raise ValueError("every sample needs at least one prediction")
        best = rank_predictions(preds)[0]
        top1.append(Span(best.start, best.end))
    r1 = {t: recall_at(top1, gts, t) for t in R1_THRESHOLDS}
    grid = {t: float(np.mean([average_precision(p, g, t) for p, g in zip(predictions, gts)]))
            for t in sorted(set(MAP_GRID) | set(MAP_THRESHOLDS))}
    miou = float(np.mean([max(temporal_iou(p, g) for g in gt) for p, gt in zip(top1, gts)]))
    return MetricsReport(r1, {t: grid[t] for t in MAP_THRESHOLDS},
                         float(np.mean([grid[t] for t in MAP_GRID])), miou, len(predictions))


def predict(samples: Sequence[VideoSample], params, cfg: ModelConfig,
            batch_size: int = 64) -> list[list[Prediction]]:
    """Last-layer spans scored by p_cls * p_iou, one list per sample."""
    out: list[list[Prediction] | None] = [None] * len(samples)
    with no_grad():
        for idx in shape_batches(samples, list(range(len(samples))), batch_size):
            trace = forward([samples[i] for i in idx], params, cfg)
            heads = trace.last.heads
            spans = heads.spans
            score = heads.p_cls.data * heads.p_iou.data
            for row, i in enumerate(idx):
                out[i] = [Prediction(float(s), float(e), float(c))
                          for (s, e), c in zip(spans[row], score[row])]
    return out  # type: ignore[return-value]


def evaluate(corpus: Sequence[VideoSample], params, cfg: ModelConfig,
             batch_size: int = 64) -> MetricsReport:
    if not corpus:
        raise ValueError("cannot evaluate an empty corpus")
    preds = predict(corpus, params, cfg, batch_size)
    return compute_report(preds, [s.gt_spans for s in corpus])
