import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simdetr.metrics import (
    MAP_GRID,
    MetricsReport,
    Prediction,
    average_precision,
    compute_report,
    evaluate,
    predict,
    rank_predictions,
    recall_at,
    temporal_iou,
)
from simdetr.model import ModelConfig, init_params
from simdetr.numcore import stream
from simdetr.synthgen import GenConfig, Span, generate


def _ap_oracle(preds, gts, thr):
    """Direct definition: IoU matrix, ranked claim of the best open GT, prefix precisions."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].start))
    iou = np.array([[temporal_iou((preds[i].start, preds[i].end), g) for g in gts] for i in order])
    open_ = np.ones(len(gts), dtype=bool)
    is_tp = []
    for row in iou:
        best = [g for g in np.argsort(-row, kind="stable") if row[g] >= thr]
        first_open = next((g for g in best if open_[g]), None)
        if first_open is not None:
            open_[first_open] = False
        is_tp.append(first_open is not None)
    is_tp = np.array(is_tp, dtype=float)
    prec = np.cumsum(is_tp) / np.arange(1, len(is_tp) + 1)
    return float((prec * is_tp).sum() / len(gts))


def _random_case(rng):
    k = int(rng.integers(1, 6))
    m = int(rng.integers(1, 11))
    gts = [Span(*sorted(rng.random(2))) for _ in range(k)]
    preds = [Prediction(*sorted(rng.random(2)), float(rng.integers(0, 4)) / 3) for _ in range(m)]
    return preds, gts


class TestIou:
    def test_hand_value(self):
        assert abs(temporal_iou((0, 0.5), (0.25, 0.75)) - 1 / 3) <= 1e-12

    def test_disjoint_and_identical(self):
        assert temporal_iou((0, 0.2), (0.5, 0.7)) == 0.0
        assert temporal_iou((0.1, 0.6), (0.1, 0.6)) == 1.0
        assert temporal_iou((0.3, 0.3), (0.3, 0.3)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
    def test_symmetric_unit_range(self, xs):
        a, b = sorted(xs[:2]), sorted(xs[2:])
        v = temporal_iou(a, b)
        assert v == temporal_iou(b, a)
        assert 0.0 <= v <= 1.0


class TestRecall:
    def test_below_threshold(self):
        assert recall_at([Span(0, 0.5)], [[Span(0.25, 0.75)]], 0.5) == 0.0

    def test_any_gt_counts(self):
        assert recall_at([Span(0.6, 0.9)], [[Span(0, 0.2), Span(0.6, 0.9)]], 0.7) == 1.0

    def test_fraction(self):
        top1 = [Span(0, 0.5), Span(0.2, 0.4)]
        gts = [[Span(0, 0.5)], [Span(0.6, 0.8)]]
        assert recall_at(top1, gts, 0.5) == 0.5

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            recall_at([], [], 0.5)

    def test_monotone_in_threshold(self):
        rng = stream(0, "rec")
        top1 = [Span(*sorted(rng.random(2))) for _ in range(40)]
        gts = [[Span(*sorted(rng.random(2)))] for _ in range(40)]
        vals = [recall_at(top1, gts, t) for t in np.linspace(0, 1, 21)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([Prediction(0.1, 0.3, 0.9)], [Span(0.1, 0.3)], 0.5) == 1.0

    def test_tp_fp_tp(self):
        gts = [Span(0.0, 0.2), Span(0.6, 0.8)]
        preds = [Prediction(0.0, 0.2, 0.9), Prediction(0.3, 0.4, 0.8), Prediction(0.6, 0.8, 0.7)]
        assert abs(average_precision(preds, gts, 0.5) - (1 + 2 / 3) / 2) <= 1e-12

    def test_all_fp(self):
        assert average_precision([Prediction(0.5, 0.6, 1.0)], [Span(0, 0.1)], 0.5) == 0.0

    def test_duplicate_is_fp(self):
        preds = [Prediction(0.0, 0.2, 0.9), Prediction(0.0, 0.2, 0.8)]
        assert average_precision(preds, [Span(0, 0.2)], 0.5) == 1.0
        assert average_precision(preds, [Span(0, 0.2), Span(0.5, 0.9)], 0.5) == 0.5

    def test_no_gt_raises(self):
        with pytest.raises(ValueError):
            average_precision([Prediction(0, 1, 1)], [], 0.5)

    def test_tie_break_on_start(self):
        preds = [Prediction(0.6, 0.8, 0.5), Prediction(0.0, 0.2, 0.5)]
        assert [p.start for p in rank_predictions(preds)] == [0.0, 0.6]
        # the earlier-start FP ranks first regardless of input order
        gts = [Span(0.6, 0.8)]
        assert average_precision(preds, gts, 0.5) == 0.5
        assert average_precision(preds[::-1], gts, 0.5) == 0.5

    def test_brute_force_oracle(self):
        rng = stream(1, "ap")
        for _ in range(50):
            preds, gts = _random_case(rng)
            for thr in MAP_GRID:
                assert average_precision(preds, gts, thr) == pytest.approx(_ap_oracle(preds, gts, thr), abs=1e-15)

    def test_monotone_in_threshold(self):
        rng = stream(2, "ap")
        for _ in range(30):
            preds, gts = _random_case(rng)
            vals = [average_precision(preds, gts, t) for t in MAP_GRID]
            assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))


class TestReport:
    def test_oracle_predictions_score_one(self):
        samples = generate(GenConfig(samples=20, seed=3))
        preds = []
        for s in samples:
            p = [Prediction(g.start, g.end, 1.0) for g in s.gt_spans]
            p += [Prediction(0.0, 0.01, 0.1)] * 3
            preds.append(p)
        r = compute_report(preds, [s.gt_spans for s in samples])
        assert r.map_avg == 1.0 and r.miou == 1.0
        assert all(v == 1.0 for v in r.r1.values())
        assert all(v == 1.0 for v in r.map_at.values())

    def test_corpus_oracle(self):
        rng = stream(3, "rep")
        cases = [_random_case(rng) for _ in range(50)]
        preds, gts = [c[0] for c in cases], [c[1] for c in cases]
        r = compute_report(preds, gts)
        top1 = [rank_predictions(p)[0] for p in preds]
        for thr, v in r.r1.items():
            ref = np.mean([max(temporal_iou((t.start, t.end), g) for g in gt) >= thr for t, gt in zip(top1, gts)])
            assert v == ref
        for thr, v in r.map_at.items():
            assert v == pytest.approx(np.mean([_ap_oracle(p, g, thr) for p, g in zip(preds, gts)]), abs=1e-15)
        ref_avg = np.mean([np.mean([_ap_oracle(p, g, t) for p, g in zip(preds, gts)]) for t in MAP_GRID])
        assert r.map_avg == pytest.approx(ref_avg, abs=1e-15)
        assert r.miou == pytest.approx(
            np.mean([max(temporal_iou((t.start, t.end), g) for g in gt) for t, gt in zip(top1, gts)]), abs=1e-15)

    def test_threshold_grid(self):
        assert MAP_GRID == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_report([], [])
        with pytest.raises(ValueError):
            compute_report([[]], [[Span(0, 1)]])

    def test_json_round_trip(self):
        r = compute_report([[Prediction(0, 0.5, 1)]], [[Span(0.25, 0.75)]])
        back = MetricsReport.from_dict(json.loads(r.to_json()))
        assert back == r


def test_evaluate_uses_last_layer_predictions():
    cfg = ModelConfig(input_dim=8, hidden_dim=8, num_queries=3, num_decoder_layers=2, mlp_hidden=4, ffn_hidden=8)
    samples = generate(GenConfig(n_frames=6, feature_dim=8, text_len=3, min_length=1 / 6,
                                 max_length=2 / 6, segments_max=2, samples=7, seed=2))
    params = init_params(cfg)
    preds = predict(samples, params, cfg, batch_size=3)
    assert [len(p) for p in preds] == [3] * 7
    assert all(0 <= p.start <= p.end <= 1 for ps in preds for p in ps)
    assert evaluate(samples, params, cfg, batch_size=3) == compute_report(preds, [s.gt_spans for s in samples])
    assert evaluate(samples, params, cfg, batch_size=64) == evaluate(samples, params, cfg, batch_size=2)
