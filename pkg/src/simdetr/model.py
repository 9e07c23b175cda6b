"""DETR-style temporal grounding model with optional Sim-DETR mechanisms.

Shapes use B for the batch, N frames, L text tokens, M queries and C hidden
channels. All samples in one forward call must share N and L.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import mechanisms
from .numcore import (
    ParamStore,
    ShapeError,
    Tensor,
    exp,
    layer_norm,
    matmul,
    maximum,
    minimum,
    relu,
    sigmoid,
    softmax,
    stream,
)
from .synthgen import VideoSample


@dataclass
class ModelConfig:
    input_dim: int = 16
    hidden_dim: int = 32
    num_queries: int = 10
    num_decoder_layers: int = 3
    mlp_hidden: int = 16
    ffn_hidden: int = 128
    dropout: float = 0.1
    enable_qgr: bool = True
    enable_glb: bool = True
    lambda_l1: float = 10.0
    lambda_giou: float = 1.0
    lambda_cls: float = 4.0
    lambda_saliency: float = 1.0
    lambda_bridge: float = 1.0
    lambda_iou: float = 1.0
    mu_l1: float = 10.0
    mu_giou: float = 1.0
    mu_cls: float = 4.0
    background_weight: float = 0.1
    saliency_margin: float = 0.2
    tau_init: float = 10.0
    query_init_std: float = 0.02
    seed: int = 0

    def validate(self) -> ModelConfig:
        if self.num_queries < 1 or self.num_decoder_layers < 1:
            raise ValueError("num_queries and num_decoder_layers must be >= 1")
        if min(self.input_dim, self.hidden_dim, self.mlp_hidden, self.ffn_hidden) < 1:
            raise ValueError("dimensions must be >= 1")
        weights = [self.lambda_l1, self.lambda_giou, self.lambda_cls, self.lambda_saliency,
                   self.lambda_bridge, self.lambda_iou, self.mu_l1, self.mu_giou, self.mu_cls,
                   self.background_weight]
        if min(weights) < 0:
            raise ValueError("loss and matcher weights must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        return self

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig(**{**asdict(self), **changes}).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: Mapping) -> ModelConfig:
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj).validate()


# -- parameters --------------------------------------------------------------

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig) -> ParamStore:
    """Fresh parameters for every module the config can switch on.

    Mechanism parameters are always created so checkpoints share one layout;
    :func:`trainable_names` reports which ones the loss actually reaches.
    """
    cfg.validate()
    c, h, f, m = cfg.hidden_dim, cfg.mlp_hidden, cfg.ffn_hidden, cfg.num_queries
    store = ParamStore(rng_seed=cfg.seed)

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        rng = stream(cfg.seed, f"init/{name}")
        store.add(f"{name}.w", _xavier(rng, fan_in, fan_out))
        store.add(f"{name}.b", np.zeros(fan_out))

    def norm(name: str) -> None:
        store.add(f"{name}.g", np.ones(c))
        store.add(f"{name}.b", np.zeros(c))

    linear("enc.frame_proj", cfg.input_dim, c)
    linear("enc.text_proj", cfg.input_dim, c)
    for k in "qkvo":
        linear(f"enc.ca.{k}", c, c)
    norm("enc.ln")
    linear("enc.ffn.fc1", c, f)
    linear("enc.ffn.fc2", f, c)
    linear("enc.saliency", c, 1)

    store.add("dec.query", cfg.query_init_std * stream(cfg.seed, "init/dec.query").standard_normal((m, c)))
    for layer in range(cfg.num_decoder_layers):
        for block in ("sa", "ca"):
            for k in "qkvo":
                linear(f"dec.{layer}.{block}.{k}", c, c)
        norm(f"dec.{layer}.ln")
        linear(f"dec.{layer}.mlp.fc1", c, f)
        linear(f"dec.{layer}.mlp.fc2", f, c)
        if layer > 0:
            linear(f"qgr.{layer}.fc1", 1, h)
            linear(f"qgr.{layer}.fc2", h, 1)

    linear("head.span.fc1", c, c)
    linear("head.span.fc2", c, 2)
    linear("head.cls", c, 1)
    linear("head.iou.fc1", c, c)
    linear("head.iou.fc2", c, 1)
    store.add("glb.log_tau", np.array(np.log(cfg.tau_init)))
    return store


def trainable_names(params: Mapping[str, Tensor], cfg: ModelConfig) -> list[str]:
    """Names of the parameters the total loss depends on under ``cfg``."""
    skip = set()
    if not cfg.enable_qgr:
        skip.add("qgr.")
    if not (cfg.enable_glb and cfg.lambda_bridge > 0):
        skip.add("glb.")
    if cfg.lambda_iou == 0:
        skip.add("head.iou.")
    if cfg.lambda_saliency == 0:
        skip.add("enc.saliency.")
    if cfg.lambda_cls == 0:
        skip.add("head.cls.")
    if cfg.lambda_l1 == 0 and cfg.lambda_giou == 0:
        skip.add("head.span.")
    return [n for n in sorted(params) if not any(n.startswith(s) for s in skip)]


class _Scope(dict):
    """Parameters under one prefix; a missing key is reported by its full name."""

    def __init__(self, prefix: str, items):
        super().__init__(items)
        self.prefix = prefix

    def __missing__(self, key: str):
        raise KeyError(f"missing parameter {self.prefix}.{key}")


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    head = prefix + "."
    full = f"{params.prefix}.{prefix}" if isinstance(params, _Scope) else prefix
    found = _Scope(full, {k[len(head):]: v for k, v in params.items() if k.startswith(head)})
    if not found:
        raise KeyError(f"missing parameters under {prefix!r}")
    return found


def _linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _mlp(x: Tensor, p: Mapping[str, Tensor], name: str, drop: Dropout | None = None) -> Tensor:
    h = relu(_linear(x, p, f"{name}.fc1"))
    if drop is not None:
        h = drop(h)
    return _linear(h, p, f"{name}.fc2")


@dataclass
class Dropout:
    """Inverted dropout drawing masks from a caller-owned generator."""

    rate: float
    rng: np.random.Generator

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate == 0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * (keep / (1.0 - self.rate))


def positional_encoding(n_frames: int, dim: int) -> np.ndarray:
    """Fixed sinusoids over normalised frame centers.

    Frequencies are geometric between one half-cycle and N/2 half-cycles per
    video so that the lowest channel orders the whole video and the highest
    resolves single frames.
    """
    t = (np.arange(n_frames) + 0.5) / n_frames
    n_freq = dim // 2
    top = max(n_frames / 2.0, 1.0)
    freqs = np.pi * top ** (np.arange(n_freq) / max(n_freq - 1, 1))
    pe = np.zeros((n_frames, dim))
    pe[:, 0:2 * n_freq:2] = np.sin(t[:, None] * freqs)
    pe[:, 1:2 * n_freq:2] = np.cos(t[:, None] * freqs)
    return pe


# -- building blocks ----------------------------------------------------------

def _as_batch(samples: VideoSample | Sequence[VideoSample]) -> list[VideoSample]:
    return [samples] if isinstance(samples, VideoSample) else list(samples)


def stack_features(samples: Sequence[VideoSample]) -> tuple[np.ndarray, np.ndarray]:
    shapes = {(s.frame_features.shape, s.text_features.shape) for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"samples in one batch must share (N, C) and (L, C); got {sorted(shapes)}")
    frames = np.stack([s.frame_features for s in samples])
    text = np.stack([s.text_features for s in samples])
    return frames, text


def shape_batches(samples: Sequence[VideoSample], order: Sequence[int], batch_size: int) -> list[list[int]]:
    """Chunk ``order`` into batches; a chunk mixing feature shapes is split by shape."""
    out = []
    for i in range(0, len(order), batch_size):
        chunk = order[i:i + batch_size]
        groups: dict[tuple, list[int]] = {}
        for j in chunk:
            s = samples[j]
            groups.setdefault((s.frame_features.shape, s.text_features.shape), []).append(j)
        out.extend(groups.values())
    return out


def encode(frames, text, params: Mapping[str, Tensor], cfg: ModelConfig,
           drop: Dropout | None = None) -> tuple[Tensor, Tensor]:
    """Fuse frames with the sentence; returns ``(memory (B,N,C), saliency (B,N))``.

    Projected frames attend to projected tokens, then
    ``memory = FFN(LayerNorm(attended) + frames)`` and a linear head with a
    sigmoid scores each frame.
    """
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    text = text if isinstance(text, Tensor) else Tensor(text)
    if frames.shape[-1] != cfg.input_dim or text.shape[-1] != cfg.input_dim:
        raise ShapeError(f"feature dim {frames.shape[-1]}/{text.shape[-1]} != input_dim {cfg.input_dim}")
    p = _sub(params, "enc")
    c = cfg.hidden_dim
    t = _linear(frames, p, "frame_proj")
    w = _linear(text, p, "text_proj")
    q = _linear(t, p, "ca.q")
    k = _linear(w, p, "ca.k")
    v = _linear(w, p, "ca.v")
    attn = softmax(matmul(q, k.T) * (1.0 / np.sqrt(c)), axis=-1)
    fused = _linear(matmul(attn, v), p, "ca.o")
    memory = _mlp(layer_norm(fused, p["ln.g"], p["ln.b"]) + t, p, "ffn", drop)
    sal = sigmoid(_linear(memory, p, "saliency"))
    return memory, sal.reshape(sal.shape[:-1])


def decoder_layer(q: Tensor, memory: Tensor, p: Mapping[str, Tensor],
                  s_attn: Tensor | None = None, c: int | None = None,
                  drop: Dropout | None = None) -> tuple[Tensor, Tensor]:
    """One decoder layer: (modulated) self-attention, cross-attention, MLP.

    ``memory`` is the key/value source for cross-attention (the encoder output
    with positional encoding added). Returns ``(updated queries, A)`` where
    ``A`` is the row-stochastic query-to-frame attention.
    """
    c = c or q.shape[-1]
    if memory.shape[-1] != q.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != memory dim {memory.shape[-1]}")
    if s_attn is not None:
        m = q.shape[-2]
        if s_attn.shape[-2:] != (m, m):
            raise ShapeError(f"modulation shape {s_attn.shape} does not match {m} queries")
    sa, _ = mechanisms.modulated_self_attention(q, s_attn, _sub(p, "sa"))
    qq = _linear(sa, p, "ca.q")
    tk = _linear(memory, p, "ca.k")
    tv = _linear(memory, p, "ca.v")
    attn = softmax(matmul(qq, tk.T) * (1.0 / np.sqrt(c)), axis=-1)
    ca = _linear(matmul(attn, tv), p, "ca.o")
    x = layer_norm(ca, p["ln.g"], p["ln.b"]) + q
    return _mlp(x, p, "mlp", drop), attn


@dataclass
class HeadOutput:
    start: Tensor  # (B, M)
    end: Tensor  # (B, M)
    cls_logit: Tensor  # (B, M)
    p_cls: Tensor  # (B, M)
    p_iou: Tensor  # (B, M)

    @property
    def spans(self) -> np.ndarray:
        return np.stack([self.start.data, self.end.data], axis=-1)


def predict_heads(q: Tensor, params: Mapping[str, Tensor]) -> HeadOutput:
    """Span, confidence and IoU heads (shared across decoder layers)."""
    p = _sub(params, "head")
    uv = sigmoid(_mlp(q, p, "span"))
    u, v = uv[..., 0], uv[..., 1]
    logit = _linear(q, p, "cls")
    logit = logit.reshape(logit.shape[:-1])
    iou = sigmoid(_mlp(q, p, "iou"))
    return HeadOutput(minimum(u, v), maximum(u, v), logit, sigmoid(logit),
                      iou.reshape(iou.shape[:-1]))


@dataclass
class LayerTrace:
    queries: Tensor  # (B, M, C)
    heads: HeadOutput
    cross_attn: Tensor  # (B, M, N)
    modulation: Tensor | None  # (B, M, M)

    @property
    def spans(self) -> np.ndarray:
        return self.heads.spans


@dataclass
class DecoderTrace:
    memory: Tensor  # (B, N, C)
    saliency: Tensor  # (B, N)
    layers: list[LayerTrace]
    tau: Tensor
    matches: list[list] = field(default_factory=list)  # [layer][sample] -> MatchResult

    @property
    def batch_size(self) -> int:
        return self.memory.shape[0]

    @property
    def last(self) -> LayerTrace:
        return self.layers[-1]


def forward(samples: VideoSample | Sequence[VideoSample], params: Mapping[str, Tensor],
            cfg: ModelConfig, modulation_override=None,
            rng: np.random.Generator | None = None) -> DecoderTrace:
    """Run encoder, decoder stack and heads after every layer.

    With ``cfg.enable_qgr`` each layer after the first modulates its
    self-attention with spans and scores from the previous layer's heads.
    ``modulation_override`` (an array broadcastable to ``(B, M, M)``) replaces
    the computed modulation at every layer after the first; it exists for
    equivalence checks. Passing ``rng`` switches on training-mode dropout
    in the encoder FFN and decoder MLPs.
    """
    batch = _as_batch(samples)
    frames, text = stack_features(batch)
    drop = Dropout(cfg.dropout, rng) if rng is not None and cfg.dropout > 0 else None
    memory, sal = encode(frames, text, params, cfg, drop)
    keyed = memory + positional_encoding(memory.shape[1], cfg.hidden_dim)
    q0 = params["dec.query"]
    if q0.shape != (cfg.num_queries, cfg.hidden_dim):
        raise ShapeError(f"dec.query has shape {q0.shape}, config expects "
                         f"({cfg.num_queries}, {cfg.hidden_dim})")
    q = q0 + np.zeros((len(batch), 1, 1))
    layers: list[LayerTrace] = []
    prev: HeadOutput | None = None
    for layer in range(cfg.num_decoder_layers):
        s_attn = None
        if layer > 0 and modulation_override is not None:
            s_attn = Tensor(np.broadcast_to(modulation_override,
                                            (len(batch), cfg.num_queries, cfg.num_queries)))
        elif layer > 0 and cfg.enable_qgr:
            s_intra = mechanisms.span_border_distance(prev.spans)
            rank = mechanisms.rank_relation(prev.p_cls, prev.p_iou)
            s_attn = mechanisms.attention_modulation(s_intra, rank, {
                "w1": params[f"qgr.{layer}.fc1.w"], "b1": params[f"qgr.{layer}.fc1.b"],
                "w2": params[f"qgr.{layer}.fc2.w"], "b2": params[f"qgr.{layer}.fc2.b"]})
        q, attn = decoder_layer(q, keyed, _sub(params, f"dec.{layer}"), s_attn, cfg.hidden_dim, drop)
        prev = predict_heads(q, params)
        layers.append(LayerTrace(q, prev, attn, s_attn))
    tau = exp(params["glb.log_tau"])
    return DecoderTrace(memory, sal, layers, tau)
