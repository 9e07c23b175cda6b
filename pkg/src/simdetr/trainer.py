"""Seeded training loop and the query/layer sweep."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .matchloss import LossBreakdown, total_loss
from .metrics import evaluate
from .model import ModelConfig, forward, init_params, shape_batches, trainable_names
from .numcore import (
    NonFiniteError,
    OptimState,
    ParamStore,
    adamw_step,
    backward,
    clip_grad_norm,
    no_grad,
    stream,
)
from .synthgen import VideoSample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    eval_every: int = 0
    diag_every: int = 0
    seed: int = 0

    def validate(self) -> TrainConfig:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        return self

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes}).validate()

    @classmethod
    def from_dict(cls, obj: Mapping) -> TrainConfig:
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj).validate()

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


RUNLOG_HEADER = ["epoch", "total", "l1", "giou", "cls", "saliency", "bridge", "iou",
                 "val_map_avg", "val_r1_05"]


@dataclass
class EpochRow:
    epoch: int
    total: float
    l1: float
    giou: float
    cls: float
    saliency: float
    bridge: float
    iou: float
    val_map_avg: float | None = None
    val_r1_05: float | None = None


@dataclass
class RunLog:
    rows: list[EpochRow] = field(default_factory=list)
    # (epoch, step, per-layer matches per sample, gt counts) captured every diag_every steps
    matches: list[tuple[int, int, list, list[int]]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_HEADER)
        for r in self.rows:
            w.writerow([r.epoch] + [repr(getattr(r, k)) for k in RUNLOG_HEADER[1:8]]
                       + ["" if r.val_map_avg is None else repr(r.val_map_avg),
                          "" if r.val_r1_05 is None else repr(r.val_r1_05)])
        return buf.getvalue()


def _check_dims(corpus: Sequence[VideoSample], cfg: ModelConfig, what: str) -> None:
    if not corpus:
        raise ValueError(f"{what} corpus is empty")
    dims = {s.feature_dim for s in corpus}
    if dims != {cfg.input_dim}:
        raise ValueError(f"{what} corpus feature dims {sorted(dims)} != model input_dim {cfg.input_dim}")


def mean_loss(corpus: Sequence[VideoSample], params, cfg: ModelConfig, batch_size: int = 64) -> LossBreakdown:
    """Sample-weighted mean loss over a corpus, without recording a tape."""
    acc = dict.fromkeys(LossBreakdown.TERMS + ("total",), 0.0)
    with no_grad():
        for idx in shape_batches(corpus, list(range(len(corpus))), batch_size):
            batch = [corpus[i] for i in idx]
            lb = total_loss(forward(batch, params, cfg), batch, cfg)
            for k, v in lb.as_dict().items():
                acc[k] += v * len(batch) / len(corpus)
    return LossBreakdown(**acc)


def train(train_set: Sequence[VideoSample], val_set: Sequence[VideoSample] | None,
          model_cfg: ModelConfig, train_cfg: TrainConfig,
          params: ParamStore | None = None,
          on_epoch: Callable[[EpochRow], None] | None = None) -> tuple[ParamStore, RunLog]:
    """Train with AdamW on mean-of-sample losses, seeded shuffling and global-norm clipping."""
    model_cfg.validate()
    train_cfg.validate()
    _check_dims(train_set, model_cfg, "train")
    if val_set:
        _check_dims(val_set, model_cfg, "val")
    params = init_params(model_cfg) if params is None else params
    names = trainable_names(params, model_cfg)
    opt = OptimState(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    shuffle = stream(train_cfg.seed, "trainer/shuffle")
    dropout_rng = stream(train_cfg.seed, "trainer/dropout")
    runlog = RunLog()
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle.permutation(len(train_set)).tolist()
        acc = dict.fromkeys(LossBreakdown.TERMS + ("total",), 0.0)
        for idx in shape_batches(train_set, order, train_cfg.batch_size):
            batch = [train_set[i] for i in idx]
            params.zero_grad()
            try:
                trace = forward(batch, params, model_cfg, rng=dropout_rng)
                lb = total_loss(trace, batch, model_cfg)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            if not np.isfinite(lb.total):
                raise TrainingDiverged(f"NaN loss at epoch {epoch}, step {step}")
            backward(lb.objective)
            clip_grad_norm(params, train_cfg.grad_clip, names)
            adamw_step(params, opt, names)
            step += 1
            if train_cfg.diag_every and step % train_cfg.diag_every == 0:
                runlog.matches.append((epoch, step, trace.matches, [len(s.gt_spans) for s in batch]))
            for k, v in lb.as_dict().items():
                acc[k] += v * len(batch) / len(train_set)
        row = EpochRow(epoch, **{k: acc[k] for k in ("total",) + LossBreakdown.TERMS})
        if val_set and train_cfg.eval_every and (epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs):
            rep = evaluate(val_set, params, model_cfg)
            row.val_map_avg, row.val_r1_05 = rep.map_avg, rep.r1[0.5]
        runlog.rows.append(row)
        log.info("epoch %d total %.4f map %s", epoch, row.total, row.val_map_avg)
        if on_epoch:
            on_epoch(row)
    return params, runlog


ABLATION_HEADER = ["queries", "layers", "map_avg", "r1_05"]


@dataclass
class AblationRow:
    queries: int
    layers: int
    map_avg: float
    r1_05: float


def ablate(train_set: Sequence[VideoSample], val_set: Sequence[VideoSample], model_cfg: ModelConfig,
           train_cfg: TrainConfig, queries: Sequence[int], layers: Sequence[int]) -> list[AblationRow]:
    """Train one independent, identically seeded run per (queries, layers) cell."""
    rows = []
    for m in queries:
        for n_layers in layers:
            cfg = model_cfg.replace(num_queries=int(m), num_decoder_layers=int(n_layers))
            params, _ = train(train_set, None, cfg, train_cfg)
            rep = evaluate(val_set, params, cfg)
            rows.append(AblationRow(int(m), int(n_layers), rep.map_avg, rep.r1[0.5]))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([r.queries, r.layers, repr(r.map_avg), repr(r.r1_05)])
    return buf.getvalue()
