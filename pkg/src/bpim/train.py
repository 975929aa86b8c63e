"""Target assignment, the composite loss, the SGD warmup/cosine schedule,
evaluation and the module ablation runner."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms as _tv_batched_nms

from .data import AnnotatedImage, collate, hflip, letterbox_item
from .geometry import ciou_tensor, cxcywh_to_xyxy
from .metrics import EvalResult, evaluate_detections
from .model import FLAGS, LEVELS, STRIDES, BPIMNet, ModelConfig, build, count_flops, count_params, decode, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr0: float = 0.01
    weight_decay: float = 0.0005
    momentum: float = 0.9
    warmup_epochs: int = 3
    warmup_bias_lr: float = 0.1
    warmup_momentum: float = 0.8
    batch_size: int = 8
    epochs: int = 100
    lrf: float = 0.01  # final lr as a fraction of lr0
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5
    obj_balance: tuple[float, float, float, float] = (4.0, 1.0, 0.4, 0.1)
    anchor_t: float = 4.0
    grad_clip: float = 10.0
    flip: bool = False
    eval_interval: int = 0  # 0: evaluate only after the last epoch
    conf_threshold: float = 0.001
    iou_nms: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.obj_balance = tuple(float(b) for b in self.obj_balance)
        self.validate()

    def validate(self) -> "TrainConfig":
        for name in ("lr0", "momentum", "warmup_bias_lr", "warmup_momentum", "lrf"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if len(self.obj_balance) != len(LEVELS):
            raise ValueError("obj_balance needs one weight per level")
        return self


# ---------------------------------------------------------------------------
# target assignment


class Assignment(NamedTuple):
    """Positive samples per level; ``box`` holds the target in grid units relative to the cell."""

    image: dict[int, torch.Tensor]
    anchor: dict[int, torch.Tensor]
    gj: dict[int, torch.Tensor]
    gi: dict[int, torch.Tensor]
    box: dict[int, torch.Tensor]
    cls: dict[int, torch.Tensor]
    anchor_wh: dict[int, torch.Tensor]
    gt_index: dict[int, torch.Tensor]
    unmatched: int

    def num_positives(self) -> int:
        return sum(len(v) for v in self.image.values())

    def as_set(self) -> set[tuple[int, int, int, int, int, int]]:
        """``(level, gt, image, anchor, gj, gi)`` tuples, for comparisons."""
        return {
            (k, int(g), int(b), int(a), int(j), int(i))
            for k in LEVELS
            for g, b, a, j, i in zip(self.gt_index[k], self.image[k], self.anchor[k], self.gj[k], self.gi[k])
        }


_NEIGHBORS = torch.tensor([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], dtype=torch.float32)


def assign_targets(
    targets: torch.Tensor,
    anchors: torch.Tensor,
    grids: Mapping[int, tuple[int, int]],
    anchor_t: float = 4.0,
) -> Assignment:
    """Match ground truth to anchors level by level.

    ``targets`` is ``[n, 6]`` (image, class, cx, cy, w, h) normalized;
    ``anchors`` is ``[4, 3, 2]`` in pixels; ``grids`` maps level to ``(H, W)``.
    A box matches an anchor when both side ratios lie in ``[1/anchor_t, anchor_t]``.
    Each match claims the cell holding the box center plus the horizontally and
    vertically adjacent cells nearest to the center, when those lie inside the grid.
    """
    out = {name: {} for name in ("image", "anchor", "gj", "gi", "box", "cls", "anchor_wh", "gt_index")}
    matched = torch.zeros(len(targets), dtype=torch.bool)
    g = 0.5
    gt_ids = torch.arange(len(targets))
    for li, k in enumerate(LEVELS):
        h, w = grids[k]
        stride = STRIDES[k]
        anc = anchors[li].to(torch.float32) / stride  # grid units
        na = len(anc)
        gain = torch.tensor([w, h, w, h], dtype=torch.float32)
        if len(targets):
            t = targets[:, 2:6].to(torch.float32) * gain  # [n, 4] grid units
            r = t[None, :, 2:4] / anc[:, None, :]  # [na, n, 2]
            ok = torch.maximum(r, 1 / r).amax(-1) < anchor_t
            a_idx, t_idx = ok.nonzero(as_tuple=True)
        else:
            a_idx = t_idx = torch.zeros(0, dtype=torch.long)
        matched[t_idx] = True
        gxy = targets[t_idx, 2:4].to(torch.float32) * gain[:2]
        gxi = gain[:2] - gxy
        jx, jy = ((gxy % 1 < g) & (gxy > 1)).T
        lx, ly = ((gxi % 1 < g) & (gxi > 1)).T
        sel = torch.stack((torch.ones_like(jx), jx, jy, lx, ly))  # [5, m]
        rep = sel.nonzero(as_tuple=True)
        offs = (_NEIGHBORS[:, None, :] * g).expand(5, len(gxy), 2)[rep]
        m_idx = rep[1]
        cell = (gxy[m_idx] - offs).long()
        gi = cell[:, 0].clamp(0, w - 1)
        gj = cell[:, 1].clamp(0, h - 1)
        ti = t_idx[m_idx]
        tbox = targets[ti, 2:6].to(torch.float32) * gain
        out["image"][k] = targets[ti, 0].long()
        out["anchor"][k] = a_idx[m_idx]
        out["gj"][k] = gj
        out["gi"][k] = gi
        out["box"][k] = torch.cat((tbox[:, :2] - torch.stack((gi, gj), 1).float(), tbox[:, 2:]), 1)
        out["cls"][k] = targets[ti, 1].long()
        out["anchor_wh"][k] = anc[a_idx[m_idx]] if na else anc
        out["gt_index"][k] = gt_ids[ti]
    unmatched = int((~matched).sum())
    if unmatched:
        log.debug("%d ground-truth boxes matched no anchor", unmatched)
    return Assignment(**out, unmatched=unmatched)


# ---------------------------------------------------------------------------
# loss


class LossParts(NamedTuple):
    box: torch.Tensor
    obj: torch.Tensor
    cls: torch.Tensor


def _level_view(p: torch.Tensor, na: int) -> torch.Tensor:
    n, _, h, w = p.shape
    return p.view(n, na, -1, h, w).permute(0, 1, 3, 4, 2)


def predicted_boxes(ps: torch.Tensor, anchor_wh: torch.Tensor) -> torch.Tensor:
    """Raw head rows at matched cells -> ``(x, y, w, h)`` in grid units relative to the cell."""
    pxy = ps[:, :2].sigmoid() * 2 - 0.5
    pwh = (ps[:, 2:4].sigmoid() * 2) ** 2 * anchor_wh.to(ps.dtype)
    return torch.cat((pxy, pwh), 1)


def objectness_targets(preds: Mapping[int, torch.Tensor], asg: Assignment, na: int = 3, detach_alpha: bool = True) -> dict[int, torch.Tensor]:
    """Clamped-CIoU objectness targets; where several matches share a slot the largest wins."""
    out = {}
    for k in LEVELS:
        pi = _level_view(preds[k], na)
        tobj = torch.zeros(pi.shape[:4], dtype=pi.dtype)
        if len(asg.image[k]):
            ps = pi[asg.image[k], asg.anchor[k], asg.gj[k], asg.gi[k]]
            with torch.no_grad():
                c = ciou_tensor(predicted_boxes(ps, asg.anchor_wh[k]), asg.box[k].to(ps.dtype), detach_alpha)
            flat = ((asg.image[k] * na + asg.anchor[k]) * pi.shape[2] + asg.gj[k]) * pi.shape[3] + asg.gi[k]
            tobj.view(-1).scatter_reduce_(0, flat, c.clamp(0, 1).to(tobj.dtype), reduce="amax")
        out[k] = tobj
    return out


def compute_loss(
    preds: Mapping[int, torch.Tensor],
    asg: Assignment,
    hyp: TrainConfig,
    num_classes: int,
    obj_targets: Mapping[int, torch.Tensor] | None = None,
    detach_alpha: bool = True,
) -> tuple[torch.Tensor, LossParts]:
    """``box * mean(1 - CIoU) + obj * sum_k balance_k * BCE_k + cls * BCE``.

    ``obj_targets`` may be passed in precomputed (they carry no gradient either way).
    """
    na = 3
    ref = preds[LEVELS[0]]
    zero = ref.new_zeros(())
    if obj_targets is None:
        obj_targets = objectness_targets(preds, asg, na, detach_alpha)
    box_terms, cls_terms, lobj = [], [], zero
    for li, k in enumerate(LEVELS):
        pi = _level_view(preds[k], na)
        if len(asg.image[k]):
            ps = pi[asg.image[k], asg.anchor[k], asg.gj[k], asg.gi[k]]
            c = ciou_tensor(predicted_boxes(ps, asg.anchor_wh[k]), asg.box[k].to(ps.dtype), detach_alpha)
            box_terms.append(1.0 - c)
            if num_classes > 1:
                t = torch.zeros_like(ps[:, 5:])
                t[torch.arange(len(ps)), asg.cls[k]] = 1.0
                cls_terms.append(F.binary_cross_entropy_with_logits(ps[:, 5:], t, reduction="none").mean(1))
        lobj = lobj + hyp.obj_balance[li] * F.binary_cross_entropy_with_logits(pi[..., 4], obj_targets[k].to(pi.dtype))
    lbox = torch.cat(box_terms).mean() if box_terms else zero
    lcls = torch.cat(cls_terms).mean() if cls_terms else zero
    parts = LossParts(lbox, lobj, lcls)
    total = hyp.box * lbox + hyp.obj * lobj + hyp.cls * lcls
    return total, parts


# ---------------------------------------------------------------------------
# schedule


def lr_factor(epoch: float, hyp: TrainConfig) -> float:
    """1 through warmup, then cosine decay to ``lrf`` at the final epoch."""
    if epoch < hyp.warmup_epochs or hyp.epochs <= hyp.warmup_epochs:
        return 1.0
    t = min((epoch - hyp.warmup_epochs) / (hyp.epochs - hyp.warmup_epochs), 1.0)
    return 1.0 - (1.0 - hyp.lrf) * (1 - math.cos(math.pi * t)) / 2


def warmup_values(step: int, epoch: int, warmup_steps: int, hyp: TrainConfig) -> tuple[list[float], float]:
    """Learning rates for the (bn-weight, weight, bias) groups and the momentum at ``step``."""
    target = hyp.lr0 * lr_factor(epoch, hyp)
    if step >= warmup_steps:
        return [target, target, target], hyp.momentum
    frac = step / warmup_steps
    lerp = lambda a, b: a + (b - a) * frac  # noqa: E731
    return [lerp(0.0, target), lerp(0.0, target), lerp(hyp.warmup_bias_lr, target)], lerp(hyp.warmup_momentum, hyp.momentum)


def make_optimizer(model: nn.Module, hyp: TrainConfig) -> torch.optim.SGD:
    bn_w, weights, biases = [], [], []
    for mod in model.modules():
        for name, p in mod.named_parameters(recurse=False):
            if name == "bias":
                biases.append(p)
            elif isinstance(mod, (nn.BatchNorm2d, nn.BatchNorm3d, nn.GroupNorm, nn.LayerNorm)):
                bn_w.append(p)
            else:
                weights.append(p)
    opt = torch.optim.SGD(bn_w, lr=hyp.lr0, momentum=hyp.momentum)
    opt.add_param_group({"params": weights, "weight_decay": hyp.weight_decay})
    opt.add_param_group({"params": biases})
    return opt


# ---------------------------------------------------------------------------
# training


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


@dataclass
class TrainResult:
    model: BPIMNet
    history: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    steps: int = 0
    checkpoint: Path | None = None
    eval: EvalResult | None = None


def _prepare(dataset: Sequence[AnnotatedImage], size: int) -> list[AnnotatedImage]:
    out = []
    for item in dataset:
        if item.image.shape[1:] == (size, size):
            out.append(item)
        else:
            out.append(letterbox_item(item, size)[0])
    return out


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[AnnotatedImage],
    out_dir: str | Path | None = None,
    val_dataset: Sequence[AnnotatedImage] | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """SGD training with linear warmup and cosine decay.

    Writes ``metrics.jsonl`` (one record per epoch) and ``last.ckpt`` under
    ``out_dir`` when given. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if not dataset:
        raise ValueError("empty dataset")
    hyp = train_cfg
    seed_everything(hyp.seed)
    model = build(model_cfg, seed=hyp.seed)
    model.train()
    data = _prepare(dataset, model_cfg.input_size)
    val = _prepare(val_dataset, model_cfg.input_size) if val_dataset is not None else data
    opt = make_optimizer(model, hyp)
    nb = math.ceil(len(data) / hyp.batch_size)
    warmup_steps = hyp.warmup_epochs * nb
    anchors = model.detect.anchors
    rng = np.random.default_rng(hyp.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_dir / "metrics.jsonl").open("w")
    result = TrainResult(model)
    step = 0
    try:
        for epoch in range(hyp.epochs):
            model.train()
            order = rng.permutation(len(data))
            sums = np.zeros(4)
            for bi in range(nb):
                idx = order[bi * hyp.batch_size : (bi + 1) * hyp.batch_size]
                batch = [data[i] for i in idx]
                if hyp.flip:
                    batch = [hflip(it) if rng.random() < 0.5 else it for it in batch]
                images, targets = collate(batch)
                lrs, mom = warmup_values(step, epoch, warmup_steps, hyp)
                for group, lr in zip(opt.param_groups, lrs):
                    group["lr"] = lr
                    group["momentum"] = mom
                preds = model(images)
                grids = {k: tuple(preds[k].shape[-2:]) for k in LEVELS}
                asg = assign_targets(targets, anchors, grids, hyp.anchor_t)
                loss, parts = compute_loss(preds, asg, hyp, model_cfg.num_classes)
                if not torch.isfinite(loss):
                    ckpt = None
                    if out_dir is not None:
                        ckpt = save_checkpoint(model, out_dir / "diverged.ckpt", {"epoch": epoch, "step": step})
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", ckpt)
                opt.zero_grad(set_to_none=True)
                # gradients are taken on the batch sum, as in the baseline training recipe
                (loss * len(batch)).backward()
                if hyp.grad_clip > 0:
                    nn.utils.clip_grad_norm_(model.parameters(), hyp.grad_clip)
                opt.step()
                step += 1
                sums += [loss.item(), parts.box.item(), parts.obj.item(), parts.cls.item()]
            mean = sums / nb
            record = {
                "epoch": epoch,
                "steps": step,
                "loss": mean[0],
                "box": mean[1],
                "obj": mean[2],
                "cls": mean[3],
                "lr": [g["lr"] for g in opt.param_groups],
            }
            last = epoch == hyp.epochs - 1
            if last or (hyp.eval_interval and (epoch + 1) % hyp.eval_interval == 0):
                ev = evaluate(model, val, hyp.conf_threshold, hyp.iou_nms, with_cost=False)
                record.update(map50=ev.map50, map5095=ev.map5095)
                result.eval = ev
            result.history.append(record)
            result.final_loss = float(mean[0])
            if metrics_file is not None:
                metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_file.flush()
            if callback is not None:
                callback(record)
            log.info("epoch %d loss %.5f", epoch, mean[0])
    finally:
        if metrics_file is not None:
            metrics_file.close()
    result.steps = step
    model.eval()
    if out_dir is not None:
        result.checkpoint = save_checkpoint(model, out_dir / "last.ckpt", {"epochs": hyp.epochs, "steps": step, "final_loss": result.final_loss})
    return result


# ---------------------------------------------------------------------------
# inference and evaluation


def batched_nms(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Class-wise NMS over cxcywh boxes; kept indices by descending score."""
    return _tv_batched_nms(cxcywh_to_xyxy(boxes).float(), scores.float(), classes, iou_threshold)


@torch.no_grad()
def predict(model: BPIMNet, images: torch.Tensor, conf_threshold: float = 0.25, iou_nms: float = 0.45, max_det: int = 300, max_nms: int = 30000) -> list[torch.Tensor]:
    """Per-image ``[n, 6]`` detections (``cx, cy, w, h, conf, class``, normalized), best class per box."""
    model.eval()
    param = next(model.parameters())
    images = images.to(param.dtype)
    rows = decode(model(images), model.detect.anchors, tuple(images.shape[-2:]))
    out = []
    for r in rows:
        cls_prob = r[:, 5:] if r.shape[1] > 5 else torch.ones_like(r[:, 4:5])
        score, cls = (r[:, 4:5] * cls_prob).max(1)
        keep = score > conf_threshold
        boxes, score, cls = r[keep, :4], score[keep], cls[keep]
        if len(score) > max_nms:
            top = torch.argsort(score, descending=True, stable=True)[:max_nms]
            boxes, score, cls = boxes[top], score[top], cls[top]
        idx = batched_nms(boxes, score, cls, iou_nms)[:max_det]
        out.append(torch.cat((boxes[idx], score[idx, None], cls[idx, None].to(boxes.dtype)), 1).float())
    return out


def evaluate(
    model: BPIMNet,
    dataset: Sequence[AnnotatedImage],
    conf_threshold: float = 0.001,
    iou_nms: float = 0.6,
    batch_size: int = 8,
    with_cost: bool = True,
) -> EvalResult:
    data = _prepare(dataset, model.cfg.input_size)
    dets, gts = [], []
    for s in range(0, len(data), batch_size):
        batch = data[s : s + batch_size]
        images, _ = collate(batch)
        dets.extend(predict(model, images, conf_threshold, iou_nms))
        gts.extend(torch.from_numpy(it.labels) for it in batch)
    res = evaluate_detections(dets, gts, model.cfg.num_classes)
    if with_cost:
        res.params_m = count_params(model) / 1e6
        res.gflops = count_flops(model) / 1e9
    return res


# ---------------------------------------------------------------------------
# ablation

ABLATION_COLUMNS = ["Datasets", "YOLOv5n-P2", "BIG", "AWF", "PIG", "CSF", "mAP@.5:.95", "mAP@.5", "Parameters (M)", "GFLOPs", "seed"]
_FLAG_COLUMNS = {"big": "BIG", "awf": "AWF", "pig": "PIG", "csf_tff": "CSF"}


def parse_flag_row(row: Sequence[str] | Mapping[str, bool]) -> dict[str, bool]:
    if isinstance(row, Mapping):
        unknown = set(row) - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown module flags {sorted(unknown)}")
        return {f: bool(row.get(f, False)) for f in FLAGS}
    unknown = set(row) - set(FLAGS)
    if unknown:
        raise ValueError(f"unknown module flags {sorted(unknown)}")
    return {f: f in row for f in FLAGS}


def ablate(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[AnnotatedImage],
    flag_matrix: Sequence[Sequence[str] | Mapping[str, bool]],
    dataset_name: str = "synthetic",
    val_dataset: Sequence[AnnotatedImage] | None = None,
    out_csv: str | Path | None = None,
) -> tuple[list[dict], str]:
    """Train and evaluate one model per flag row under the same seed and budget.

    Returns the rows and the CSV text (also written to ``out_csv``).
    """
    rows = []
    for flags in flag_matrix:
        flags = parse_flag_row(flags)
        cfg = model_cfg.with_flags(**flags)
        res = train(cfg, train_cfg, dataset, val_dataset=val_dataset)
        ev = res.eval
        rows.append(
            {
                "Datasets": dataset_name,
                "YOLOv5n-P2": "x",
                **{_FLAG_COLUMNS[f]: "x" if on else "" for f, on in flags.items()},
                "mAP@.5:.95": f"{100 * ev.map5095:.2f}",
                "mAP@.5": f"{100 * ev.map50:.2f}",
                "Parameters (M)": f"{count_params(res.model) / 1e6:.6f}",
                "GFLOPs": f"{count_flops(res.model) / 1e9:.3f}",
                "seed": str(train_cfg.seed),
            }
        )
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if out_csv is not None:
        Path(out_csv).write_text(text)
    return rows, text


def train_config_from_dict(d: Mapping) -> TrainConfig:
    names = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown train config keys {sorted(unknown)}")
    return TrainConfig(**d)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["obj_balance"] = list(cfg.obj_balance)
    return d


__all__ = [
    "TrainConfig",
    "Assignment",
    "assign_targets",
    "compute_loss",
    "objectness_targets",
    "train",
    "evaluate",
    "predict",
    "ablate",
    "lr_factor",
    "warmup_values",
    "TrainingDiverged",
]
