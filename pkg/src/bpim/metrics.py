"""Detection matching and COCO-style 101-point average precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .geometry import box_iou_matrix

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    map50: float
    map5095: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    params_m: float = 0.0
    gflops: float = 0.0

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "params_m": self.params_m,
            "gflops": self.gflops,
        }


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP for detections already sorted by descending confidence."""
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def match_image(det_boxes: torch.Tensor, gt_boxes: torch.Tensor, iou_threshold: float) -> np.ndarray:
    """Greedy one-to-one matching; ``det_boxes`` must be sorted by descending confidence.

    Each detection takes the unmatched ground truth with the highest IoU at or
    above the threshold. Returns a boolean true-positive flag per detection.
    """
    tp = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    ious = box_iou_matrix(det_boxes.double(), gt_boxes.double()).numpy()
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            tp[i] = True
    return tp


def evaluate_detections(detections: Sequence[torch.Tensor], ground_truth: Sequence[torch.Tensor], num_classes: int) -> EvalResult:
    """Score per-image detections against ground truth.

    ``detections[i]`` is ``[n, 6]`` rows of ``cx, cy, w, h, conf, class``;
    ``ground_truth[i]`` is ``[m, 5]`` rows of ``class, cx, cy, w, h``. Classes
    without ground truth are left out of the mean.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("need one detection tensor per ground-truth image")
    ap = np.zeros((len(IOU_THRESHOLDS), num_classes))
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        num_gt = sum(int((g[:, 0] == c).sum()) for g in ground_truth)
        if num_gt == 0:
            continue
        present[c] = True
        for ti, thr in enumerate(IOU_THRESHOLDS):
            confs, flags = [], []
            for det, gt in zip(detections, ground_truth):
                d = det[det[:, 5] == c]
                order = torch.argsort(d[:, 4], descending=True, stable=True)
                d = d[order]
                g = gt[gt[:, 0] == c][:, 1:5]
                flags.append(match_image(d[:, :4], g, float(thr)))
                confs.append(d[:, 4].double().numpy())
            conf = np.concatenate(confs) if confs else np.zeros(0)
            tp = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
            order = np.argsort(-conf, kind="stable")
            ap[ti, c] = average_precision(tp[order], num_gt)
    if not present.any():
        return EvalResult(0.0, 0.0, {})
    per_class = {c: float(ap[0, c]) for c in range(num_classes) if present[c]}
    map50 = float(ap[0, present].mean())
    # the mean of ten equal APs can overshoot the 0.5 value by an ulp
    map5095 = min(float(ap[:, present].mean()), map50)
    return EvalResult(map50, map5095, per_class)
