"""Sim-DETR style temporal sentence grounding on synthetic data, built on a
small numpy autodiff core."""
from .diagnostics import DiagnosticsReport, diagnose
from .matchloss import LossBreakdown, MatchResult, giou_1d, hungarian_match, total_loss
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, forward, init_params
from .synthgen import GenConfig, Span, VideoSample, generate, generate_corpus, load_corpus
from .trainer import TrainConfig, ablate, train

__version__ = "0.1.0"
