"""Probes of query behaviour: segment assignment, intra/inter similarity,
cross-layer matching consistency and global-vs-local scores."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .matchloss import MatchResult, match_layers
from .metrics import temporal_iou
from .model import ModelConfig, forward, shape_batches
from .numcore import no_grad
from .synthgen import Span, VideoSample, atomic_write_text, frame_mask

ASSIGN_THRESHOLD = 0.5
SUBSETS = ("single", "multi", "all")
SIMILARITY_HEADER = ["kind", "value"]
CONSISTENCY_HEADER = ["layer_pair", "subset", "fraction"]
GLOBAL_LOCAL_HEADER = ["global", "local"]


def assign_queries(spans, gts: Sequence[Span | Sequence[float]],
                   threshold: float = ASSIGN_THRESHOLD) -> list[int | None]:
    """GT index with the highest IoU per predicted span, or None below ``threshold``.

    Ties in IoU go to the smaller GT index.
    """
    out: list[int | None] = []
    for b in np.asarray(spans, dtype=np.float64).reshape(-1, 2):
        best, best_iou = None, -1.0
        for g, gt in enumerate(gts):
            iou = temporal_iou(b, gt)
            if iou > best_iou:
                best, best_iou = g, iou
        out.append(best if best is not None and best_iou >= threshold else None)
    return out


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    # one square root of the product keeps identical vectors at exactly 1
    denom = float(a @ a) * float(b @ b)
    if denom == 0:
        return 0.0
    return float(np.clip(a @ b / np.sqrt(denom), -1.0, 1.0))


def similarity_histograms(features, assignment: Sequence[int | None]) -> tuple[list[float], list[float]]:
    """Cosine similarity of every unordered pair of assigned queries, split by
    whether both queries belong to the same GT."""
    feats = np.asarray(features, dtype=np.float64)
    if len(feats) != len(assignment):
        raise ValueError(f"{len(feats)} feature rows for {len(assignment)} assignments")
    assigned = [i for i, g in enumerate(assignment) if g is not None]
    intra, inter = [], []
    for i, j in combinations(assigned, 2):
        (intra if assignment[i] == assignment[j] else inter).append(_cos(feats[i], feats[j]))
    return intra, inter


def _pair_label(layer: int) -> str:
    return f"{layer + 1}-{layer + 2}"


@dataclass
class ConsistencyTally:
    """Running counts of GTs that keep their matched query between consecutive layers."""

    n_layers: int | None = None
    # layer pair label -> subset -> [retained, total]
    counts: dict[str, dict[str, list[int]]] = field(default_factory=dict)

    def add(self, matches: Sequence[Sequence[MatchResult]], n_gts: Sequence[int]) -> None:
        """Record matches laid out as ``[layer][sample]``."""
        if self.n_layers is None:
            self.n_layers = len(matches)
        elif len(matches) != self.n_layers:
            raise ValueError(f"got matches for {len(matches)} layers, expected {self.n_layers}")
        for layer, per_sample in enumerate(matches):
            if len(per_sample) != len(n_gts):
                raise ValueError(f"layer {layer + 1} has {len(per_sample)} samples, expected {len(n_gts)}")
        for layer in range(len(matches) - 1):
            slot = self.counts.setdefault(_pair_label(layer), {s: [0, 0] for s in SUBSETS})
            for b, k in enumerate(n_gts):
                now, nxt = matches[layer][b].query_of(), matches[layer + 1][b].query_of()
                if len(now) != k or len(nxt) != k:
                    raise ValueError(f"sample {b}: expected {k} matched GTs per layer")
                kept = sum(now[g] == nxt[g] for g in now)
                for subset in ("single" if k == 1 else "multi", "all"):
                    slot[subset][0] += kept
                    slot[subset][1] += k

    def fractions(self) -> dict[str, dict[str, float]]:
        return {pair: {s: r / t for s, (r, t) in subsets.items() if t > 0}
                for pair, subsets in self.counts.items()}


def matching_consistency(matches: Sequence[Sequence[MatchResult]],
                         n_gts: Sequence[int]) -> dict[str, dict[str, float]]:
    """Fraction of GTs whose matched query index is unchanged between layers l and l+1.

    ``matches`` is laid out ``[layer][sample]``. The result maps a pair label
    such as ``"1-2"`` to per-subset fractions; subsets without any GT are left
    out, and a single-layer model yields an empty map.
    """
    tally = ConsistencyTally()
    tally.add(matches, n_gts)
    return tally.fractions()


def global_local_scores(p_cls, attn, assignment: Sequence[int | None],
                        gts: Sequence[Span | Sequence[float]]) -> list[tuple[float, float]]:
    """``(P_cls, local)`` per assigned query.

    The local score is the set IoU over frame indices between frames receiving
    at least the uniform share ``1/N`` of the query's attention and the frames
    of its assigned GT.
    """
    p_cls = np.asarray(p_cls, dtype=np.float64).reshape(-1)
    attn = np.asarray(attn, dtype=np.float64)
    n = attn.shape[-1]
    out = []
    for i, g in enumerate(assignment):
        if g is None:
            continue
        # tolerance so an exactly uniform row counts every frame
        mask = attn[i] >= 1.0 / n - 1e-12
        gt = frame_mask(gts[g], n).astype(bool)
        union = np.count_nonzero(mask | gt)
        local = np.count_nonzero(mask & gt) / union if union else 0.0
        out.append((float(p_cls[i]), float(local)))
    return out


@dataclass
class DiagnosticsReport:
    intra_sims: list[float] = field(default_factory=list)
    inter_sims: list[float] = field(default_factory=list)
    consistency: dict[str, dict[str, float]] = field(default_factory=dict)
    global_local: list[tuple[float, float]] = field(default_factory=list)

    @property
    def similarity_gap(self) -> float:
        """Mean intra-segment minus mean inter-segment similarity (NaN if either is empty)."""
        if not self.intra_sims or not self.inter_sims:
            return float("nan")
        return float(np.mean(self.intra_sims) - np.mean(self.inter_sims))

    def mean_consistency(self, subset: str = "all") -> float:
        vals = [v[subset] for v in self.consistency.values() if subset in v]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_local(self, min_global: float = 0.7) -> float:
        vals = [loc for glob, loc in self.global_local if glob >= min_global]
        return float(np.mean(vals)) if vals else float("nan")

    def similarity_csv(self) -> str:
        rows = [("intra", v) for v in self.intra_sims] + [("inter", v) for v in self.inter_sims]
        return _csv(SIMILARITY_HEADER, ((k, repr(v)) for k, v in rows))

    def consistency_csv(self) -> str:
        rows = ((pair, s, repr(fr[s])) for pair, fr in self.consistency.items() for s in SUBSETS if s in fr)
        return _csv(CONSISTENCY_HEADER, rows)

    def global_local_csv(self) -> str:
        return _csv(GLOBAL_LOCAL_HEADER, ((repr(g), repr(l)) for g, l in self.global_local))

    def write(self, out_dir: str | os.PathLike) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, text in (("similarity.csv", self.similarity_csv()),
                           ("consistency.csv", self.consistency_csv()),
                           ("global_local.csv", self.global_local_csv())):
            path = os.path.join(out_dir, name)
            atomic_write_text(path, text)
            paths.append(path)
        return paths


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def diagnose(corpus: Sequence[VideoSample], params: Mapping, cfg: ModelConfig,
             batch_size: int = 64) -> DiagnosticsReport:
    """Run every probe over ``corpus`` with the trained ``params``.

    Assignment, similarity and global/local scores use the last decoder layer;
    consistency uses the training matcher applied at every layer.
    """
    report = DiagnosticsReport()
    tally = ConsistencyTally()
    with no_grad():
        for idx in shape_batches(corpus, list(range(len(corpus))), batch_size):
            batch = [corpus[i] for i in idx]
            trace = forward(batch, params, cfg)
            tally.add(match_layers(trace, batch, cfg), [len(s.gt_spans) for s in batch])
            last = trace.last
            for b, sample in enumerate(batch):
                assignment = assign_queries(last.spans[b], sample.gt_spans)
                intra, inter = similarity_histograms(last.queries.data[b], assignment)
                report.intra_sims += intra
                report.inter_sims += inter
                report.global_local += global_local_scores(
                    last.heads.p_cls.data[b], last.cross_attn.data[b], assignment, sample.gt_spans)
    report.consistency = tally.fractions()
    return report
