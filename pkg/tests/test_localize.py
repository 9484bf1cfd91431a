import math

import numpy as np
import pytest

from pntal.core import ActionInstance
from pntal.localize import (
    Detection,
    generate_candidates,
    load_detections,
    mean_average_precision,
    soft_nms,
    temporal_iou,
    write_detections,
)

from oracles import brute_force_average_precision


def det(video="v", start=0, end=9, cls=1, score=0.5):
    return Detection(video_id=video, start=start, end=end, class_idx=cls, score=score)


class TestTemporalIoU:
    def test_identity(self):
        assert temporal_iou(det(start=0, end=9), det(start=0, end=9)) == 1.0

    def test_disjoint(self):
        assert temporal_iou(det(start=0, end=4), det(start=5, end=9)) == 0.0

    def test_partial(self):
        value = temporal_iou(det(start=0, end=9), det(start=5, end=14))
        assert value == pytest.approx(5 / 15, abs=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = sorted(rng.integers(0, 50, size=2))
            b = sorted(rng.integers(0, 50, size=2))
            x = det(start=a[0], end=a[1])
            y = det(start=b[0], end=b[1])
            assert temporal_iou(x, y) == temporal_iou(y, x)
            assert 0.0 <= temporal_iou(x, y) <= 1.0


class TestGenerateCandidates:
    def test_hand_trace(self):
        # class 2 peaked on snippets 0-1, mask [0.9, 0.9, 0.1]
        probs = np.array([
            [0.1, 0.8, 0.1],
            [0.15, 0.7, 0.15],
            [0.2, 0.3, 0.5],
        ])
        mask = np.array([0.9, 0.9, 0.1])
        cands = generate_candidates("v", probs, mask, [0.5], [0.5])
        assert len(cands) == 1
        c = cands[0]
        assert (c.start, c.end, c.class_idx) == (0, 1, 2)
        assert c.score == pytest.approx(0.8 * 0.9, abs=1e-12)

    def test_no_mask_no_candidates(self):
        probs = np.full((4, 3), 1 / 3)
        cands = generate_candidates("v", probs, np.zeros(4), [0.1], [0.1])
        assert cands == []

    def test_whole_video_single_candidate(self):
        probs = np.tile(np.array([0.9, 0.05, 0.05]), (6, 1))
        mask = np.full(6, 0.8)
        cands = generate_candidates("v", probs, mask, [0.5], [0.5, 0.7])
        assert len(cands) == 1
        assert (cands[0].start, cands[0].end, cands[0].class_idx) == (0, 5, 1)

    def test_threshold_order_invariance(self):
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(4), size=30)
        mask = rng.random(30)
        grids = ([0.2, 0.5, 0.8], [0.8, 0.2, 0.5])
        a = generate_candidates("v", probs, mask, grids[0], grids[0])
        b = generate_candidates("v", probs, mask, grids[1], grids[1])
        assert a == b

    def test_background_never_a_candidate_class(self):
        probs = np.tile(np.array([0.05, 0.05, 0.9]), (5, 1))  # background dominant
        mask = np.full(5, 0.9)
        cands = generate_candidates("v", probs, mask, [0.01], [0.5])
        assert all(c.class_idx != 3 for c in cands)


class TestSoftNms:
    def test_disjoint_unchanged(self):
        dets = [det(start=0, end=4, score=0.9), det(start=10, end=14, score=0.8)]
        out = soft_nms(dets, sigma=0.5, score_floor=0.0)
        assert sorted(d.score for d in out) == [0.8, 0.9]

    def test_identical_boxes_decay(self):
        dets = [det(score=0.9), det(score=0.8)]
        out = soft_nms(dets, sigma=0.5, score_floor=0.0)
        assert out[0].score == pytest.approx(0.9)
        assert out[1].score == pytest.approx(0.8 * math.exp(-2.0), abs=1e-9)
        assert out[1].score == pytest.approx(0.10827, abs=1e-5)

    def test_single_detection(self):
        out = soft_nms([det(score=0.4)], sigma=0.5, score_floor=0.1)
        assert len(out) == 1 and out[0].score == 0.4

    def test_never_increases_scores(self):
        rng = np.random.default_rng(2)
        dets = []
        for _ in range(20):
            s, e = sorted(rng.integers(0, 30, size=2))
            dets.append(det(start=s, end=e, score=float(rng.random())))
        out = soft_nms(dets, sigma=0.3, score_floor=0.0)
        originals = {(d.start, d.end): d.score for d in dets}
        for d in out:
            assert d.score <= originals[(d.start, d.end)] + 1e-12

    def test_sigma_to_zero_is_hard_nms(self):
        dets = [det(start=0, end=9, score=0.9), det(start=1, end=10, score=0.85),
                det(start=20, end=29, score=0.5)]
        out = soft_nms(dets, sigma=1e-9, score_floor=0.01)
        spans = {(d.start, d.end) for d in out}
        assert spans == {(0, 9), (20, 29)}


class TestMeanAveragePrecision:
    def test_perfect_detector(self):
        gt = {"v1": (ActionInstance(0, 9, 1), ActionInstance(20, 29, 2)),
              "v2": (ActionInstance(5, 14, 1),)}
        dets = [det("v1", 0, 9, 1, 0.9), det("v1", 20, 29, 2, 0.8), det("v2", 5, 14, 1, 0.95)]
        result = mean_average_precision(dets, gt, [0.3, 0.5, 0.7])
        assert result.average_map == pytest.approx(1.0)
        for _, value in result.per_threshold:
            assert value == pytest.approx(1.0)

    def test_no_detections(self):
        gt = {"v": (ActionInstance(0, 9, 1),)}
        result = mean_average_precision([], gt, [0.5])
        assert result.average_map == 0.0

    def test_hand_constructed_pr(self):
        # 2 GT for class 1; detections: TP, FP, TP in score order.
        gt = {"v": (ActionInstance(0, 9, 1), ActionInstance(20, 29, 1))}
        dets = [det("v", 0, 9, 1, 0.9), det("v", 40, 49, 1, 0.8), det("v", 20, 29, 1, 0.7)]
        result = mean_average_precision(dets, gt, [0.5])
        # PR points: (1, 0.5), (0.5, 0.5), (2/3, 1.0) -> AP = 0.5*1 + 0.5*(2/3)
        assert result.map_at(0.5) == pytest.approx(5 / 6, abs=1e-9)

    def test_input_order_invariance(self):
        rng = np.random.default_rng(3)
        gt, dets = _random_scene(rng)
        base = mean_average_precision(dets, gt, [0.3, 0.5])
        shuffled = list(dets)
        rng.shuffle(shuffled)
        again = mean_average_precision(shuffled, gt, [0.3, 0.5])
        assert base.per_threshold == again.per_threshold

    def test_monotone_rescaling_invariance(self):
        rng = np.random.default_rng(4)
        gt, dets = _random_scene(rng)
        base = mean_average_precision(dets, gt, [0.4])
        rescaled = [Detection(d.video_id, d.start, d.end, d.class_idx, 0.1 + 0.5 * d.score**3)
                    for d in dets]
        again = mean_average_precision(rescaled, gt, [0.4])
        assert base.map_at(0.4) == pytest.approx(again.map_at(0.4), abs=1e-12)

    def test_skipped_classes_reported(self):
        gt = {"v": (ActionInstance(0, 9, 1),)}
        dets = [det("v", 0, 9, 5, 0.9)]
        result = mean_average_precision(dets, gt, [0.5])
        assert result.skipped_classes == (5,)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            gt, dets = _random_scene(rng)
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            result = mean_average_precision(dets, gt, [thr])
            # oracle, averaged per class over classes with ground truth
            classes = sorted({i.class_idx for insts in gt.values() for i in insts})
            aps = []
            for cls in classes:
                cls_dets = [(d.video_id, d.start, d.end, d.score) for d in dets if d.class_idx == cls]
                cls_gt = [(vid, i.start, i.end) for vid, insts in gt.items()
                          for i in insts if i.class_idx == cls]
                aps.append(brute_force_average_precision(cls_dets, cls_gt, thr))
            expected = float(np.mean(aps)) if aps else 0.0
            assert result.map_at(thr) == pytest.approx(expected, abs=1e-9)


def _random_scene(rng, n_videos=2, max_gt=4, max_det=8):
    gt = {}
    dets = []
    for v in range(n_videos):
        vid = f"v{v}"
        instances = []
        cursor = 0
        for _ in range(rng.integers(1, max_gt + 1)):
            start = cursor + int(rng.integers(0, 6))
            end = start + int(rng.integers(2, 10))
            if end >= 90:
                break
            instances.append(ActionInstance(start, end, int(rng.integers(1, 4))))
            cursor = end + 2
        gt[vid] = tuple(instances)
        for _ in range(rng.integers(0, max_det + 1)):
            s = int(rng.integers(0, 80))
            e = s + int(rng.integers(1, 15))
            dets.append(Detection(vid, s, e, int(rng.integers(1, 4)), float(rng.random())))
    return gt, dets


def test_detection_dump_round_trip(tmp_path):
    dets = [det("video-a", 3, 17, 2, 0.123456789012345), det("video-b", 0, 4, 1, 1.0)]
    path = tmp_path / "dets.tsv"
    write_detections(path, dets)
    loaded = load_detections(path)
    assert loaded == dets
