"""Synthetic temporal-grounding corpora.

Every ground-truth segment of a video shares one sentence embedding, so the
segments are semantically identical and only their positions tell them apart.
Background frames are drawn around a distractor direction whose cosine with
the sentence is fixed by ``distractor_similarity``.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .numcore import stream


class Span(NamedTuple):
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start

    def validate(self) -> Span:
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise ValueError(f"invalid span ({self.start}, {self.end}): need 0 <= start <= end <= 1")
        return self


def frame_mask(span: Span | Sequence[float], n_frames: int) -> np.ndarray:
    """1.0 for frames whose center (j + 0.5) / N lies in the closed span."""
    centers = (np.arange(n_frames) + 0.5) / n_frames
    return ((centers >= span[0]) & (centers <= span[1])).astype(np.float64)


def saliency_labels(spans: Iterable[Span | Sequence[float]], n_frames: int) -> np.ndarray:
    out = np.zeros(n_frames)
    for s in spans:
        out = np.maximum(out, frame_mask(s, n_frames))
    return out


@dataclass
class VideoSample:
    id: str
    frame_features: np.ndarray  # (N, C)
    text_features: np.ndarray  # (L, C)
    gt_spans: list[Span]
    saliency: np.ndarray  # (N,) of {0, 1}

    @property
    def n_frames(self) -> int:
        return self.frame_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frame_features.shape[1]

    @property
    def text_len(self) -> int:
        return self.text_features.shape[0]

    def gt_array(self) -> np.ndarray:
        return np.asarray(self.gt_spans, dtype=np.float64).reshape(-1, 2)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "n_frames": self.n_frames,
            "feature_dim": self.feature_dim,
            "text_len": self.text_len,
            "frame_features": self.frame_features.tolist(),
            "text_features": self.text_features.tolist(),
            "gt_spans": [[float(s), float(e)] for s, e in self.gt_spans],
            "saliency": [int(v) for v in self.saliency],
        }

    @classmethod
    def from_record(cls, rec: dict) -> VideoSample:
        n, c, L = int(rec["n_frames"]), int(rec["feature_dim"]), int(rec["text_len"])
        frames = np.asarray(rec["frame_features"], dtype=np.float64)
        text = np.asarray(rec["text_features"], dtype=np.float64)
        if frames.shape != (n, c):
            raise ValueError(f"frame_features shape {frames.shape} != ({n}, {c})")
        if text.shape != (L, c):
            raise ValueError(f"text_features shape {text.shape} != ({L}, {c})")
        if not (np.isfinite(frames).all() and np.isfinite(text).all()):
            raise ValueError("non-finite feature value")
        spans = [Span(float(s), float(e)).validate() for s, e in rec["gt_spans"]]
        if not spans:
            raise ValueError("sample has no ground-truth spans")
        sal = np.asarray(rec["saliency"], dtype=np.float64)
        if sal.shape != (n,) or not np.isin(sal, (0.0, 1.0)).all():
            raise ValueError("saliency must be a length-N vector of 0/1")
        return cls(str(rec["id"]), frames, text, spans, sal)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (self.id == other.id and self.gt_spans == other.gt_spans
                and np.array_equal(self.frame_features, other.frame_features)
                and np.array_equal(self.text_features, other.text_features)
                and np.array_equal(self.saliency, other.saliency))


@dataclass
class GenConfig:
    n_frames: int = 32
    feature_dim: int = 16
    text_len: int = 8
    segments_min: int = 1
    segments_max: int = 3
    min_length: float = 0.1
    max_length: float = 0.25
    noise_sigma: float = 0.15
    distractor_similarity: float = 0.3
    allow_overlap: bool = False
    # empty frames required between consecutive segments when overlap is off
    min_gap_frames: int = 1
    samples: int = 100
    seed: int = 0
    id_prefix: str = "vid"

    def validate(self) -> GenConfig:
        if self.n_frames < 1 or self.feature_dim < 2 or self.text_len < 1:
            raise ValueError("n_frames, text_len must be >= 1 and feature_dim >= 2")
        if not 1 <= self.segments_min <= self.segments_max:
            raise ValueError("need 1 <= segments_min <= segments_max")
        if not 0.0 < self.min_length <= self.max_length <= 1.0:
            raise ValueError("need 0 < min_length <= max_length <= 1")
        if self._min_frames() > self._max_frames():
            raise ValueError("segment length bounds admit no whole-frame length")
        if self.min_gap_frames < 0:
            raise ValueError("min_gap_frames must be non-negative")
        need = self.segments_max * self._min_frames() + (self.segments_max - 1) * self.min_gap_frames
        if not self.allow_overlap and need > self.n_frames:
            raise ValueError("lengths cannot fit segments_max non-overlapping segments")
        if not 0.0 <= self.distractor_similarity < 1.0:
            raise ValueError("distractor_similarity must lie in [0, 1)")
        if self.noise_sigma < 0 or self.samples < 0:
            raise ValueError("noise_sigma and samples must be non-negative")
        return self

    def _min_frames(self) -> int:
        return max(1, int(np.ceil(self.min_length * self.n_frames - 1e-9)))

    def _max_frames(self) -> int:
        return int(np.floor(self.max_length * self.n_frames + 1e-9))

    @classmethod
    def from_dict(cls, obj: dict) -> GenConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**obj).validate()

    def to_dict(self) -> dict:
        return asdict(self)


class GenerationError(RuntimeError):
    pass


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _place_spans(cfg: GenConfig, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    lo, hi = cfg._min_frames(), cfg._max_frames()
    for _ in range(1000):
        lengths = rng.integers(lo, hi + 1, size=k)
        starts = rng.integers(0, cfg.n_frames - lengths + 1)
        segs = sorted(zip(starts.tolist(), (starts + lengths).tolist()))
        if cfg.allow_overlap or all(a[1] + cfg.min_gap_frames <= b[0] for a, b in zip(segs, segs[1:])):
            return segs
    raise GenerationError(f"could not place {k} non-overlapping segments in 1000 attempts")


def generate_sample(cfg: GenConfig, rng: np.random.Generator, sample_id: str = "vid-0") -> VideoSample:
    """Draw one video whose segments all share a single sentence embedding.

    Segment boundaries sit on frame edges, so ``(a / N, b / N)`` covers frames
    ``a .. b-1`` exactly.
    """
    n, c = cfg.n_frames, cfg.feature_dim
    k = int(rng.integers(cfg.segments_min, cfg.segments_max + 1))
    sentence = _unit(rng.standard_normal(c))
    # distractor at an exact cosine of rho with the sentence
    ortho = rng.standard_normal(c)
    ortho = _unit(ortho - ortho @ sentence * sentence)
    rho = cfg.distractor_similarity
    distractor = rho * sentence + np.sqrt(1.0 - rho * rho) * ortho

    text = sentence + cfg.noise_sigma * rng.standard_normal((cfg.text_len, c))
    segs = _place_spans(cfg, k, rng)
    spans = [Span(a / n, b / n) for a, b in segs]
    inside = saliency_labels(spans, n).astype(bool)
    base = np.where(inside[:, None], sentence, distractor)
    frames = _unit(base + cfg.noise_sigma * rng.standard_normal((n, c)))
    return VideoSample(sample_id, frames, text, spans, inside.astype(np.float64))


def generate(cfg: GenConfig) -> list[VideoSample]:
    cfg.validate()
    return [generate_sample(cfg, stream(cfg.seed, f"synthgen/{i}"), f"{cfg.id_prefix}-{i:05d}")
            for i in range(cfg.samples)]


@dataclass
class CorpusSummary:
    path: str
    count: int
    mean_segments: float
    segment_counts: dict[int, int] = field(default_factory=dict)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_corpus(samples: Sequence[VideoSample], out_path: str | os.PathLike) -> None:
    text = "".join(json.dumps(s.to_record()) + "\n" for s in samples)
    try:
        atomic_write_text(out_path, text)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_path}: {exc.strerror or exc}") from exc


def generate_corpus(cfg: GenConfig, out_path: str | os.PathLike) -> CorpusSummary:
    samples = generate(cfg)
    dump_corpus(samples, out_path)
    counts: dict[int, int] = {}
    for s in samples:
        counts[len(s.gt_spans)] = counts.get(len(s.gt_spans), 0) + 1
    mean_k = float(np.mean([len(s.gt_spans) for s in samples])) if samples else 0.0
    return CorpusSummary(str(out_path), len(samples), mean_k, dict(sorted(counts.items())))


class CorpusFormatError(ValueError):
    pass


def load_corpus(path: str | os.PathLike) -> list[VideoSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                out.append(VideoSample.from_record(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid record: {exc}") from None
    return out
