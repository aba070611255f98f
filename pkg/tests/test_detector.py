import math

import numpy as np
import pytest
import torch

from multitrig.core import BoundingBox, DetectionRecord, DetectionSet
from multitrig.detector import (
    MIN_EXTENT,
    DetectorError,
    GridDetector,
    GridDetectorConfig,
    decode,
    detection_loss,
    encode_targets,
    load_detector,
    predict,
    save_detector,
)


def _cfg(**kw):
    base = dict(k=3, grid=4, channels=(8, 16))
    base.update(kw)
    return GridDetectorConfig(**base)


def _raw(cfg):
    return torch.zeros(cfg.grid, cfg.grid, cfg.cell_depth)


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


class TestConfig:
    @pytest.mark.parametrize(
        "bad",
        [
            {"k": 0},
            {"grid": 0},
            {"channels": ()},
            {"score_threshold": -0.1},
            {"score_threshold": 1.5},
            {"nms_iou": 1.5},
        ],
    )
    def test_rejects_bad_values(self, bad):
        with pytest.raises(DetectorError):
            _cfg(**bad)

    def test_cell_depth(self):
        assert _cfg(k=3).cell_depth == 8
        assert GridDetectorConfig(k=20).cell_depth == 25


class TestForward:
    def test_output_shape(self):
        cfg = GridDetectorConfig(k=4, grid=7, channels=(8, 16))
        model = GridDetector(cfg)
        out = model(torch.rand(2, 3, 112, 112))
        assert out.shape == (2, 7, 7, 9)

    def test_handles_non_multiple_input(self):
        model = GridDetector(_cfg())
        out = model(torch.rand(1, 3, 50, 60))
        assert out.shape == (1, 4, 4, 8)


class TestDecode:
    def test_single_cell_geometry_and_score(self):
        cfg = _cfg()  # grid 4, K 3
        raw = _raw(cfg)
        raw[1, 2, 0] = 4.0  # objectness
        raw[1, 2, 6] = 3.0  # class 1 logit
        out = decode(raw, cfg, (64, 64))
        assert len(out) == 1
        rec = out.records[0]
        assert rec.class_id == 1
        want_score = _sigmoid(4.0) * (math.exp(3.0) / (math.exp(3.0) + 2.0))
        assert rec.score == pytest.approx(want_score, abs=1e-9)
        # box logits are zero: centered in cell (row 1, col 2), half-image extent
        assert rec.box.as_tuple() == pytest.approx((24.0, 8.0, 56.0, 40.0), abs=1e-9)

    def test_all_zero_raw_is_below_threshold(self):
        cfg = _cfg()
        assert len(decode(_raw(cfg), cfg, (64, 64))) == 0  # score 1/6 < 0.3

    def test_threshold_boundary_keeps_equal_score(self):
        cfg = _cfg(score_threshold=1.0 / 6.0)
        out = decode(_raw(cfg), cfg, (64, 64))
        assert len(out) == cfg.grid * cfg.grid  # score == threshold survives

    def test_boxes_clamped_to_image(self):
        cfg = _cfg()
        raw = _raw(cfg)
        raw[0, 0, 0] = 6.0
        raw[0, 0, 3] = 6.0  # huge width
        raw[0, 0, 4] = 6.0
        raw[0, 0, 5] = 4.0
        out = decode(raw, cfg, (64, 64))
        assert len(out) == 1
        box = out.records[0].box
        assert box.x_min >= 0 and box.y_min >= 0
        assert box.x_max <= 64 and box.y_max <= 64
        assert box.inside((64, 64))

    def test_nms_same_class_suppresses(self):
        cfg = _cfg()
        raw = _raw(cfg)
        for col, obj in [(0, 4.0), (1, 3.0)]:
            raw[0, col, 0] = obj
            raw[0, col, 3] = 6.0  # near full-width boxes overlap heavily
            raw[0, col, 4] = 6.0
            raw[0, col, 5] = 4.0
        out = decode(raw, cfg, (64, 64))
        assert len(out) == 1
        assert out.records[0].score == pytest.approx(_sigmoid(4.0) * math.exp(4.0) / (math.exp(4.0) + 2.0), abs=1e-9)

    def test_nms_keeps_different_classes(self):
        cfg = _cfg()
        raw = _raw(cfg)
        for col, cls_chan in [(0, 5), (1, 6)]:
            raw[0, col, 0] = 4.0
            raw[0, col, 3] = 6.0
            raw[0, col, 4] = 6.0
            raw[0, col, cls_chan] = 4.0
        out = decode(raw, cfg, (64, 64))
        assert sorted(r.class_id for r in out) == [0, 1]

    def test_output_sorted_by_score(self):
        cfg = _cfg(score_threshold=0.1)
        raw = _raw(cfg)
        raw[0, 0, 0] = 1.0
        raw[3, 3, 0] = 3.0
        raw[0, 0, 5] = 4.0
        raw[3, 3, 6] = 4.0
        out = decode(raw, cfg, (64, 64))
        scores = [r.score for r in out]
        assert scores == sorted(scores, reverse=True)

    def test_tiny_extent_floor(self):
        cfg = _cfg()
        raw = _raw(cfg)
        raw[2, 2, 0] = 6.0
        raw[2, 2, 3] = -40.0  # sigmoid underflows to ~0
        raw[2, 2, 4] = -40.0
        raw[2, 2, 5] = 6.0
        out = decode(raw, cfg, (64, 64))
        assert len(out) == 1
        assert out.records[0].box.width >= MIN_EXTENT * 64 * 0.99

    def test_rejects_bad_input(self):
        cfg = _cfg()
        with pytest.raises(DetectorError):
            decode(torch.zeros(4, 4, 7), cfg, (64, 64))
        with pytest.raises(DetectorError):
            decode(torch.zeros(2, 4, 4, 8), cfg, (64, 64))
        bad = _raw(cfg)
        bad[0, 0, 0] = float("nan")
        with pytest.raises(DetectorError):
            decode(bad, cfg, (64, 64))


def _truth(records, size=(64, 64)):
    return DetectionSet(tuple(records), size)


def _rec(x0, y0, x1, y1, c):
    return DetectionRecord(BoundingBox(x0, y0, x1, y1), c)


class TestEncodeTargets:
    def test_center_cell_assignment(self):
        cfg = _cfg()  # grid 4 over 64 -> cell 16
        truth = _truth([_rec(20, 24, 36, 40, 2)])  # center (28, 32)
        obj, box, cls = encode_targets([truth], cfg, (64, 64))
        assert obj.sum() == 1
        assert obj[0, 2, 1] == 1  # row 2, col 1
        assert box[0, 2, 1, 0] == pytest.approx(0.75)  # 28/16 - 1
        assert box[0, 2, 1, 1] == pytest.approx(0.0)
        assert box[0, 2, 1, 2] == pytest.approx(16 / 64)
        assert box[0, 2, 1, 3] == pytest.approx(16 / 64)
        assert cls[0, 2, 1] == 2

    def test_larger_area_wins_shared_cell(self):
        cfg = _cfg()
        small = _rec(24, 24, 28, 28, 0)
        large = _rec(18, 18, 30, 30, 1)
        for order in ([small, large], [large, small]):
            obj, box, cls = encode_targets([_truth(order)], cfg, (64, 64))
            assert obj.sum() == 1
            assert cls[0, 1, 1] == 1
            assert box[0, 1, 1, 2] == pytest.approx(12 / 64)

    def test_edge_hugging_box_lands_in_last_cell(self):
        cfg = _cfg()
        truth = _truth([_rec(60, 60, 64, 64, 0)])  # center (62, 62)
        obj, _, _ = encode_targets([truth], cfg, (64, 64))
        assert obj[0, 3, 3] == 1

    def test_empty_truth(self):
        obj, box, cls = encode_targets([_truth([])], _cfg(), (64, 64))
        assert obj.sum() == 0 and box.abs().sum() == 0 and cls.sum() == 0


class TestLoss:
    def test_empty_truth_is_pure_objectness(self):
        cfg = _cfg()
        raw = torch.zeros(1, 4, 4, 8)
        loss = detection_loss(raw, [_truth([])], cfg, (64, 64))
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-6)

    def test_good_logits_beat_zero_logits(self):
        cfg = _cfg()
        truth = _truth([_rec(24, 24, 40, 40, 1)])  # center cell (2, 2), wait: (32,32) -> cell (2,2)
        zero = detection_loss(torch.zeros(1, 4, 4, 8), [truth], cfg, (64, 64))
        good = torch.full((1, 4, 4, 8), 0.0)
        good[..., 0] = -8.0
        good[0, 2, 2, 0] = 8.0
        good[0, 2, 2, 1] = 0.0  # frac 0.5
        good[0, 2, 2, 2] = 0.0
        good[0, 2, 2, 3] = math.log(0.25 / 0.75)  # sigmoid -> 16/64
        good[0, 2, 2, 4] = math.log(0.25 / 0.75)
        good[0, 2, 2, 6] = 10.0
        assert float(detection_loss(good, [truth], cfg, (64, 64))) < float(zero)

    def test_batch_mismatch_rejected(self):
        with pytest.raises(DetectorError):
            detection_loss(torch.zeros(2, 4, 4, 8), [_truth([])], _cfg(), (64, 64))
        with pytest.raises(DetectorError):
            detection_loss(torch.zeros(4, 4, 8), [_truth([])], _cfg(), (64, 64))

    def test_gradcheck(self):
        cfg = GridDetectorConfig(k=2, grid=2, channels=(4,))
        truth = _truth([_rec(4, 4, 20, 24, 1)], size=(32, 32))
        raw = torch.randn(1, 2, 2, 7, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda r: detection_loss(r, [truth], cfg, (32, 32)), (raw,), eps=1e-6, atol=1e-4
        )

    def test_loss_drops_under_training(self):
        torch.manual_seed(0)
        cfg = _cfg()
        model = GridDetector(cfg)
        x = torch.rand(2, 3, 64, 64)
        truths = [_truth([_rec(10, 10, 30, 30, 0)]), _truth([_rec(32, 8, 60, 40, 2)])]
        opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
        with torch.no_grad():
            start = float(detection_loss(model(x), truths, cfg, (64, 64)))
        for _ in range(60):
            opt.zero_grad()
            loss = detection_loss(model(x), truths, cfg, (64, 64))
            loss.backward()
            opt.step()
        with torch.no_grad():
            assert float(detection_loss(model(x), truths, cfg, (64, 64))) < 0.5 * start


class TestPersistence:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(2)
        cfg = GridDetectorConfig(k=5, grid=3, channels=(4, 8), score_threshold=0.2, nms_iou=0.4)
        model = GridDetector(cfg)
        path = tmp_path / "det.pt"
        save_detector(model, path, step=17)
        again, step = load_detector(path)
        assert step == 17
        assert again.cfg == cfg
        x = torch.rand(1, 3, 48, 48)
        with torch.no_grad():
            assert torch.equal(again(x), model(x))

    def test_predict_returns_sets(self):
        model = GridDetector(_cfg())
        sets = predict(model, torch.rand(3, 3, 64, 64), (64, 64))
        assert len(sets) == 3
        assert all(s.image_size == (64, 64) for s in sets)
