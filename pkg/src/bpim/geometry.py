"""Box arithmetic, IoU / CIoU and class-wise non-maximum suppression.

Boxes are center format ``(cx, cy, w, h)``. The scalar helpers work on
:class:`Box` objects; the ``*_tensor`` variants take ``[..., 4]`` torch
tensors and are what the loss uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch

_FOUR_OVER_PI2 = 4.0 / math.pi**2


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> "Box":
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}: width and height must be positive")
        return self

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def clip(self) -> "Box":
        """Clip to the unit square; raises if nothing remains."""
        x1, y1, x2, y2 = self.xyxy
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        return Box.from_xyxy(x1, y1, x2, y2).validate()

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.cx + dx, self.cy + dy, self.w, self.h)

    def scale(self, s: float) -> "Box":
        return Box(self.cx * s, self.cy * s, self.w * s, self.h * s)


@dataclass(frozen=True)
class Detection:
    box: Box
    cls: int
    conf: float


class CIoUParts(NamedTuple):
    iou: float
    rho2: float
    c2: float
    v: float
    alpha: float


def _overlap(c1: float, s1: float, c2: float, s2: float) -> float:
    # interval overlap from centre/size; exact for coincident or nested intervals
    return max(0.0, min(s1, s2, (s1 + s2) / 2 - abs(c1 - c2)))


def _span(c1: float, s1: float, c2: float, s2: float) -> float:
    return max(s1, s2, (s1 + s2) / 2 + abs(c1 - c2))


def iou(a: Box, b: Box) -> float:
    a.validate()
    b.validate()
    inter = _overlap(a.cx, a.w, b.cx, b.w) * _overlap(a.cy, a.h, b.cy, b.h)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def ciou(pred: Box, gt: Box) -> tuple[float, CIoUParts]:
    """Complete IoU: ``iou - rho2 / c2 - alpha * v``.

    ``c2`` is the squared diagonal of the smallest rectangle enclosing both
    boxes. Identical boxes short-circuit to exactly 1.
    """
    i = iou(pred, gt)
    cw = _span(pred.cx, pred.w, gt.cx, gt.w)
    ch = _span(pred.cy, pred.h, gt.cy, gt.h)
    c2 = cw * cw + ch * ch
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    v = _FOUR_OVER_PI2 * (math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)) ** 2
    denom = 1.0 - i + v
    alpha = v / denom if denom > 0 else 0.0
    if pred == gt:
        return 1.0, CIoUParts(1.0, 0.0, c2, 0.0, 0.0)
    return i - rho2 / c2 - alpha * v, CIoUParts(i, rho2, c2, v, alpha)


def confidence_target(pred: Box, gt: Box) -> float:
    """CIoU clamped to [0, 1], the objectness regression target."""
    value, _ = ciou(pred, gt)
    return min(max(value, 0.0), 1.0)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45, conf_threshold: float = 0.25) -> list[Detection]:
    """Greedy class-wise suppression; survivors sorted by descending confidence."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not 0.0 <= conf_threshold < 1.0:
        raise ValueError("conf_threshold must lie in [0, 1)")
    # stable sort keeps input order among equal confidences
    order = sorted((d for d in dets if d.conf >= conf_threshold), key=lambda d: -d.conf)
    keep: list[Detection] = []
    for d in order:
        if all(k.cls != d.cls or iou(k.box, d.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep


# ---------------------------------------------------------------------------
# tensor versions


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), -1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), -1)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` cxcywh boxes."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    area_a = (a[:, 2:] - a[:, :2]).prod(-1)
    area_b = (b[:, 2:] - b[:, :2]).prod(-1)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def ciou_tensor(pred: torch.Tensor, gt: torch.Tensor, detach_alpha: bool = True, eps: float = 1e-9) -> torch.Tensor:
    """Element-wise CIoU of matched ``[..., 4]`` cxcywh boxes.

    With ``detach_alpha`` the trade-off weight is a constant for autograd.
    """
    px1, py1, px2, py2 = cxcywh_to_xyxy(pred).unbind(-1)
    gx1, gy1, gx2, gy2 = cxcywh_to_xyxy(gt).unbind(-1)
    pw, ph = pred[..., 2], pred[..., 3]
    gw, gh = gt[..., 2], gt[..., 3]

    iw = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp(min=0)
    ih = (torch.minimum(py2, gy2) - torch.maximum(py1, gy1)).clamp(min=0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter + eps
    iou_ = inter / union

    cw = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    ch = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    c2 = cw**2 + ch**2 + eps
    rho2 = (pred[..., 0] - gt[..., 0]) ** 2 + (pred[..., 1] - gt[..., 1]) ** 2
    v = _FOUR_OVER_PI2 * (torch.atan(gw / (gh + eps)) - torch.atan(pw / (ph + eps))) ** 2
    alpha = v / (1 - iou_ + v + eps)
    if detach_alpha:
        alpha = alpha.detach()
    return iou_ - rho2 / c2 - alpha * v


def nms_tensor(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Class-wise greedy NMS over cxcywh boxes; returns kept indices by descending score."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    boxes, classes = boxes[order], classes[order]
    ious = box_iou_matrix(boxes, boxes)
    same = classes[:, None] == classes[None, :]
    suppress = (ious > iou_threshold) & same
    keep = torch.ones(len(boxes), dtype=torch.bool)
    for i in range(len(boxes)):
        if keep[i]:
            row = suppress[i].clone()
            row[: i + 1] = False
            keep &= ~row
    return order[keep]
