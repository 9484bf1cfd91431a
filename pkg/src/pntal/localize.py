"""Candidate generation, Soft-NMS, and mAP evaluation over tIoU grids.

Detections are inclusive snippet spans with a 1-based action class (never
background). Candidate generation sweeps a grid of classification/mask
threshold pairs: each qualifying seed snippet expands to the maximal
contiguous run of mask-positive snippets containing it, scored by the seed's
class probability times the run's mean mask score. Soft-NMS then decays
overlapping detections per class with a Gaussian kernel.

Matching for average precision is greedy in descending score order: a
detection matches the not-yet-matched ground-truth instance of the same video
and class with the highest tIoU, provided that tIoU reaches the threshold.
AP is the exact area under the precision-recall curve (all-points
interpolation); mAP averages over classes that have at least one ground-truth
instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from . import model
from .core import ActionInstance, ExperimentConfig, VideoRecord


@dataclass(frozen=True)
class Detection:
    video_id: str
    start: int
    end: int
    class_idx: int
    score: float

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"detection start {self.start} > end {self.end}")
        if self.class_idx < 1:
            raise ValueError("class_idx must be a 1-based action class")


def temporal_iou(a, b) -> float:
    """Intersection over union of two inclusive snippet spans."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter
    return inter / union


def _mask_runs(fg: np.ndarray):
    """Run id per snippet (-1 outside), plus per-run (start, end)."""
    n = len(fg)
    run_id = np.full(n, -1, dtype=np.int64)
    bounds = []
    i = 0
    while i < n:
        if fg[i]:
            j = i
            while j + 1 < n and fg[j + 1]:
                j += 1
            run_id[i : j + 1] = len(bounds)
            bounds.append((i, j))
            i = j + 1
        else:
            i += 1
    return run_id, bounds


def generate_candidates(
    video_id: str,
    class_probs: np.ndarray,
    mask_scores: np.ndarray,
    classification_thresholds: Sequence[float],
    mask_thresholds: Sequence[float],
) -> List[Detection]:
    """Threshold-grid candidate generation for one video.

    class_probs is (N, C+1) with background in the last column. Output is
    de-duplicated on (start, end, class) keeping the best score, and sorted by
    a deterministic key, so it does not depend on threshold ordering.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    masks = np.asarray(mask_scores, dtype=np.float64)
    action = probs[:, :-1]
    best = action.max(axis=1)
    best_class = action.argmax(axis=1) + 1
    cls_grid = sorted(set(float(t) for t in classification_thresholds))
    candidates: Dict[Tuple[int, int, int], float] = {}
    for theta_m in sorted(set(float(t) for t in mask_thresholds)):
        fg = masks >= theta_m
        if not fg.any():
            continue
        run_id, bounds = _mask_runs(fg)
        run_means = [float(masks[s : e + 1].mean()) for s, e in bounds]
        for theta_c in cls_grid:
            seeds = np.nonzero(fg & (best >= theta_c))[0]
            for i in seeds:
                r = run_id[i]
                s, e = bounds[r]
                key = (s, e, int(best_class[i]))
                score = float(best[i]) * run_means[r]
                if score > candidates.get(key, -1.0):
                    candidates[key] = score
    out = [
        Detection(video_id=video_id, start=s, end=e, class_idx=c, score=score)
        for (s, e, c), score in candidates.items()
    ]
    out.sort(key=lambda d: (d.start, d.end, d.class_idx))
    return out


def soft_nms(detections: Sequence[Detection], sigma: float, score_floor: float) -> List[Detection]:
    """Gaussian-decay Soft-NMS over one video's detections of one class.

    Repeatedly keeps the highest-scoring remaining detection (score ties break
    by (start, end, class)) and decays every other remaining score by
    exp(-tIoU^2 / sigma). Detections whose score ends up below the floor are
    dropped. Scores never increase.
    """
    remaining = [(d.score, d) for d in detections]
    kept: List[Detection] = []
    while remaining:
        best_i = min(
            range(len(remaining)),
            key=lambda i: (-remaining[i][0], remaining[i][1].start, remaining[i][1].end, remaining[i][1].class_idx),
        )
        score, det = remaining.pop(best_i)
        if score < score_floor:
            break
        kept.append(replace(det, score=score))
        decayed = []
        for s, d in remaining:
            iou = temporal_iou(det, d)
            decayed.append((s * math.exp(-(iou * iou) / sigma), d))
        remaining = decayed
    return kept


def ground_truth_map(videos: Sequence[VideoRecord]) -> Dict[str, tuple]:
    return {v.video_id: v.instances for v in videos}


@dataclass(frozen=True)
class EvalResult:
    per_threshold: tuple  # ((tiou, mAP), ...) in grid order
    average_map: float
    per_class: tuple  # ((tiou, class_idx, AP), ...)
    skipped_classes: tuple  # detection classes with no ground truth

    def map_at(self, tiou: float) -> float:
        for thr, value in self.per_threshold:
            if thr == tiou:
                return value
        raise KeyError(tiou)


def _average_precision(dets: List[Detection], gts: List[Tuple[str, ActionInstance]], thr: float) -> float:
    npos = len(gts)
    if npos == 0:
        return float("nan")
    matched = [False] * npos
    tp = np.zeros(len(dets))
    for i, det in enumerate(dets):
        best_iou = 0.0
        best_j = -1
        for j, (vid, inst) in enumerate(gts):
            if matched[j] or vid != det.video_id:
                continue
            iou = temporal_iou(det, inst)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= thr:
            matched[best_j] = True
            tp[i] = 1.0
    if len(dets) == 0 or tp.sum() == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(dets) + 1)
    recall = cum_tp / npos
    # All-points interpolation: exact area under the PR curve.
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def mean_average_precision(
    detections: Sequence[Detection],
    ground_truth: Mapping[str, Sequence[ActionInstance]],
    tiou_grid: Sequence[float],
) -> EvalResult:
    """mAP per tIoU threshold plus the grid average.

    Result is invariant to detection input order and to strictly monotone
    rescaling of scores. Classes that appear only in detections are reported
    as skipped; classes with ground truth but no detections score zero.
    """
    gt_by_class: Dict[int, List[Tuple[str, ActionInstance]]] = {}
    for vid, instances in ground_truth.items():
        for inst in instances:
            gt_by_class.setdefault(inst.class_idx, []).append((vid, inst))
    det_by_class: Dict[int, List[Detection]] = {}
    for det in detections:
        det_by_class.setdefault(det.class_idx, []).append(det)
    for dets in det_by_class.values():
        dets.sort(key=lambda d: (-d.score, d.video_id, d.start, d.end))

    classes = sorted(gt_by_class)
    skipped = tuple(sorted(set(det_by_class) - set(classes)))
    per_threshold = []
    per_class = []
    for thr in tiou_grid:
        aps = []
        for cls in classes:
            ap = _average_precision(det_by_class.get(cls, []), gt_by_class[cls], float(thr))
            per_class.append((float(thr), cls, ap))
            aps.append(ap)
        per_threshold.append((float(thr), float(np.mean(aps)) if aps else 0.0))
    average = float(np.mean([m for _, m in per_threshold])) if per_threshold else 0.0
    return EvalResult(
        per_threshold=tuple(per_threshold),
        average_map=average,
        per_class=tuple(per_class),
        skipped_classes=skipped,
    )


def detect_videos(
    params: model.ModelParams, videos: Sequence[VideoRecord], config: ExperimentConfig
) -> List[Detection]:
    """Model inference + candidate generation + per-class Soft-NMS."""
    from .selftrain import video_feature_matrix

    detections: List[Detection] = []
    for video in videos:
        probs, scores, _ = model.forward_batch(
            params, video_feature_matrix(video, config.feature_window)
        )
        candidates = generate_candidates(
            video.video_id,
            probs,
            scores,
            config.classification_thresholds,
            config.mask_thresholds,
        )
        by_class: Dict[int, List[Detection]] = {}
        for cand in candidates:
            by_class.setdefault(cand.class_idx, []).append(cand)
        for cls in sorted(by_class):
            detections.extend(soft_nms(by_class[cls], config.soft_nms_sigma, config.soft_nms_floor))
    detections.sort(key=lambda d: (d.video_id, d.class_idx, d.start, d.end, -d.score))
    return detections


def evaluate_model(
    params: model.ModelParams, videos: Sequence[VideoRecord], config: ExperimentConfig
) -> Tuple[List[Detection], EvalResult]:
    detections = detect_videos(params, videos, config)
    result = mean_average_precision(detections, ground_truth_map(videos), config.tiou_grid)
    return detections, result


def write_detections(path, detections: Sequence[Detection]) -> None:
    """One detection per line: video id, start, end, class, score."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(f"{d.video_id}\t{d.start}\t{d.end}\t{d.class_idx}\t{d.score!r}\n")


def load_detections(path) -> List[Detection]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{line_no}: expected 5 fields, got {len(parts)}")
            out.append(
                Detection(
                    video_id=parts[0],
                    start=int(parts[1]),
                    end=int(parts[2]),
                    class_idx=int(parts[3]),
                    score=float(parts[4]),
                )
            )
    return out
