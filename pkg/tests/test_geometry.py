import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bpim.geometry import (
    Box,
    Detection,
    box_iou_matrix,
    ciou,
    ciou_tensor,
    confidence_target,
    iou,
    nms,
    nms_tensor,
)


def raster_iou(a: Box, b: Box, step: float = 1 / 400) -> float:
    """Count grid cells whose centres fall inside each box."""
    x1 = min(a.xyxy[0], b.xyxy[0])
    y1 = min(a.xyxy[1], b.xyxy[1])
    x2 = max(a.xyxy[2], b.xyxy[2])
    y2 = max(a.xyxy[3], b.xyxy[3])
    xs = np.arange(x1 + step / 2, x2, step)
    ys = np.arange(y1 + step / 2, y2, step)
    xx, yy = np.meshgrid(xs, ys)

    def inside(bx):
        bx1, by1, bx2, by2 = bx.xyxy
        return (xx >= bx1) & (xx < bx2) & (yy >= by1) & (yy < by2)

    ia, ib = inside(a), inside(b)
    return (ia & ib).sum() / (ia | ib).sum()


def ciou_terms_by_hand(p: Box, g: Box):
    # independent straight-line evaluation in corner coordinates
    px1, px2 = p.cx - p.w / 2, p.cx + p.w / 2
    py1, py2 = p.cy - p.h / 2, p.cy + p.h / 2
    gx1, gx2 = g.cx - g.w / 2, g.cx + g.w / 2
    gy1, gy2 = g.cy - g.h / 2, g.cy + g.h / 2
    inter = max(0, min(px2, gx2) - max(px1, gx1)) * max(0, min(py2, gy2) - max(py1, gy1))
    i = inter / (p.w * p.h + g.w * g.h - inter)
    rho2 = (p.cx - g.cx) ** 2 + (p.cy - g.cy) ** 2
    c2 = (max(px2, gx2) - min(px1, gx1)) ** 2 + (max(py2, gy2) - min(py1, gy1)) ** 2
    v = 4 / math.pi**2 * (math.atan(g.w / g.h) - math.atan(p.w / p.h)) ** 2
    a = v / (1 - i + v) if v else 0.0
    return i, rho2, c2, v, a


boxes = st.builds(
    Box,
    st.floats(-2, 2),
    st.floats(-2, 2),
    st.floats(0.01, 3),
    st.floats(0.01, 3),
)


class TestIoU:
    def test_identity(self):
        b = Box(0.5, 0.5, 0.2, 0.2)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.9, 0.9, 0.1, 0.1)) == 0.0

    def test_raster_oracle(self):
        a, b = Box(1, 1, 2, 2), Box(2, 2, 2, 2)
        assert raster_iou(a, b) == pytest.approx(1 / 7, abs=1e-3)
        assert iou(a, b) == pytest.approx(0.142857, abs=1e-6)

    @pytest.mark.parametrize("bad", [Box(0.5, 0.5, 0.0, 0.1), Box(0.5, 0.5, 0.1, -0.1)])
    def test_degenerate_raises(self, bad):
        with pytest.raises(ValueError):
            iou(bad, Box(0.5, 0.5, 0.1, 0.1))

    @given(boxes, boxes)
    def test_bounds_and_symmetry(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a), abs=1e-12)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = rng.uniform([0, 0, 0.05, 0.05], [1, 1, 0.5, 0.5], size=(7, 4))
        b = rng.uniform([0, 0, 0.05, 0.05], [1, 1, 0.5, 0.5], size=(5, 4))
        m = box_iou_matrix(torch.tensor(a), torch.tensor(b)).numpy()
        ref = np.array([[iou(Box(*x), Box(*y)) for y in b] for x in a])
        np.testing.assert_allclose(m, ref, atol=1e-12)


class TestCIoU:
    def test_same_box(self):
        b = Box(0.3, 0.6, 0.1, 0.25)
        value, parts = ciou(b, b)
        assert value == 1.0
        assert parts.rho2 == 0 and parts.v == 0

    def test_concentric_same_aspect(self):
        value, parts = ciou(Box(0.5, 0.5, 0.4, 0.4), Box(0.5, 0.5, 0.2, 0.2))
        assert value == parts.iou == 0.25

    def test_hand_derived_case(self):
        p, g = Box(0, 0, 2, 2), Box(1, 0, 2, 2)
        i, rho2, c2, v, _ = ciou_terms_by_hand(p, g)
        assert (i, rho2, c2, v) == (pytest.approx(1 / 3), 1, 13, 0)
        value, parts = ciou(p, g)
        assert value == pytest.approx(i - rho2 / c2, abs=1e-12)
        assert value == pytest.approx(0.256410, abs=1e-6)
        assert parts.c2 == 13 and parts.rho2 == 1

    @given(boxes, boxes)
    def test_matches_hand_terms(self, p, g):
        value, parts = ciou(p, g)
        i, rho2, c2, v, a = ciou_terms_by_hand(p, g)
        if p != g:
            assert parts == pytest.approx((i, rho2, c2, v, a), rel=1e-9, abs=1e-12)
        assert 0.0 <= parts.v <= 1.0
        assert value <= parts.iou + 1e-12

    @given(boxes, boxes, st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 10))
    def test_translation_scale_invariance(self, a, b, dx, dy, s):
        def move(x):
            return x.translate(dx, dy).scale(s)

        va, pa = ciou(a, b)
        vb, pb = ciou(move(a), move(b))
        assert pb.iou == pytest.approx(pa.iou, abs=1e-9)
        assert pb.v == pytest.approx(pa.v, abs=1e-9)
        assert vb == pytest.approx(va, abs=1e-7)

    def test_v_zero_iff_same_aspect(self):
        _, parts = ciou(Box(0, 0, 1, 2), Box(3, 3, 2, 4))
        assert parts.v == 0.0
        _, parts = ciou(Box(0, 0, 1, 2), Box(3, 3, 2, 4.01))
        assert parts.v > 0.0

    def test_tensor_matches_scalar(self):
        rng = random.Random(3)
        for _ in range(200):
            p = Box(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5))
            g = Box(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5))
            t = ciou_tensor(torch.tensor([[p.cx, p.cy, p.w, p.h]], dtype=torch.float64), torch.tensor([[g.cx, g.cy, g.w, g.h]], dtype=torch.float64), eps=0.0)
            assert t.item() == pytest.approx(ciou(p, g)[0], abs=1e-12)


def _fd_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    for i in range(x.numel()):
        xp, xm = x.clone(), x.clone()
        xp.view(-1)[i] += h
        xm.view(-1)[i] -= h
        g.view(-1)[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_ciou_loss_gradient_full(seed):
    torch.manual_seed(seed)
    gt = torch.tensor([0.5, 0.5, 0.3, 0.2], dtype=torch.float64)
    pred = (gt + torch.randn(4, dtype=torch.float64) * torch.tensor([0.05, 0.05, 0.04, 0.04])).requires_grad_()
    loss = 1 - ciou_tensor(pred, gt, detach_alpha=False, eps=0.0)
    loss.backward()
    fd = _fd_grad(lambda p: 1 - ciou_tensor(p, gt, detach_alpha=False, eps=0.0), pred.detach())
    rel = (pred.grad - fd).abs().max() / fd.abs().max()
    assert rel <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_ciou_loss_gradient_constant_alpha(seed):
    """With alpha detached, autograd equals the derivative of the surrogate where alpha is frozen."""
    from bpim.geometry import _FOUR_OVER_PI2

    torch.manual_seed(seed)
    gt = torch.tensor([0.4, 0.6, 0.2, 0.35], dtype=torch.float64)
    pred = (gt + torch.randn(4, dtype=torch.float64) * 0.03).requires_grad_()
    (1 - ciou_tensor(pred, gt, eps=0.0)).backward()
    with torch.no_grad():
        full = ciou_tensor(pred, gt, detach_alpha=False, eps=0.0)
        v0 = _FOUR_OVER_PI2 * (torch.atan(gt[2] / gt[3]) - torch.atan(pred[2] / pred[3])) ** 2
        iou0 = box_iou_matrix(pred[None], gt[None])[0, 0]
        alpha0 = v0 / (1 - iou0 + v0)

    def frozen(p):
        v = _FOUR_OVER_PI2 * (torch.atan(gt[2] / gt[3]) - torch.atan(p[2] / p[3])) ** 2
        c = ciou_tensor(p, gt, detach_alpha=False, eps=0.0)
        # swap the live alpha*v for the frozen one
        va = v / (1 - box_iou_matrix(p[None], gt[None])[0, 0] + v)
        return 1 - (c + va * v - alpha0 * v)

    assert frozen(pred.detach()) == pytest.approx(1 - full.item(), abs=1e-12)
    fd = _fd_grad(frozen, pred.detach())
    rel = (pred.grad - fd).abs().max() / fd.abs().max()
    assert rel <= 1e-4


class TestConfidenceTarget:
    def test_identity(self):
        b = Box(0.2, 0.2, 0.1, 0.1)
        assert confidence_target(b, b) == 1.0

    def test_far_apart_clamps(self):
        assert ciou(Box(0.05, 0.05, 0.05, 0.05), Box(0.95, 0.95, 0.05, 0.1))[0] < 0
        assert confidence_target(Box(0.05, 0.05, 0.05, 0.05), Box(0.95, 0.95, 0.05, 0.1)) == 0.0

    def test_hand_case(self):
        assert confidence_target(Box(0, 0, 2, 2), Box(1, 0, 2, 2)) == pytest.approx(10 / 39, abs=1e-12)


def brute_force_nms(dets, iou_thr, conf_thr):
    """Repeatedly take the best remaining box and drop same-class overlaps."""
    pool = [d for d in dets if d.conf >= conf_thr]
    out = []
    while pool:
        best = max(range(len(pool)), key=lambda i: (pool[i].conf, -i))
        top = pool.pop(best)
        out.append(top)
        pool = [d for d in pool if d.cls != top.cls or iou(d.box, top.box) <= iou_thr]
    return out


class TestNMS:
    def test_single(self):
        d = Detection(Box(0.5, 0.5, 0.1, 0.1), 0, 0.9)
        assert nms([d], 0.5, 0.0) == [d]

    def test_empty(self):
        assert nms([], 0.5, 0.25) == []

    def test_duplicate_suppressed(self):
        a = Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.9)
        b = Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.8)
        assert nms([b, a], 0.5, 0.0) == [a]

    def test_classwise(self):
        a = Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.9)
        b = Detection(Box(0.5, 0.5, 0.2, 0.2), 1, 0.8)
        assert nms([a, b], 0.5, 0.0) == [a, b]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = random.Random(seed)
        dets = [
            Detection(Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)), rng.randrange(3), rng.random())
            for _ in range(50)
        ]
        got = nms(dets, 0.45, 0.25)
        assert got == brute_force_nms(dets, 0.45, 0.25)
        confs = [d.conf for d in got]
        assert confs == sorted(confs, reverse=True)

        boxes = torch.tensor([[d.box.cx, d.box.cy, d.box.w, d.box.h] for d in dets], dtype=torch.float64)
        scores = torch.tensor([d.conf for d in dets], dtype=torch.float64)
        classes = torch.tensor([d.cls for d in dets])
        keep = scores >= 0.25
        idx = torch.nonzero(keep).flatten()[nms_tensor(boxes[keep], scores[keep], classes[keep], 0.45)]
        assert [dets[i] for i in idx.tolist()] == got

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            nms([], 1.0, 0.2)
        with pytest.raises(ValueError):
            nms([], 0.5, 1.0)


@settings(max_examples=200)
@given(boxes)
def test_ciou_self_is_one(b):
    assert ciou(b, b)[0] == 1.0


def test_box_clip():
    b = Box(0.95, 0.5, 0.2, 0.2).clip()
    x1, y1, x2, y2 = b.xyxy
    assert x2 == pytest.approx(1.0) and x1 == pytest.approx(0.85)
    assert 0 <= y1 and y2 <= 1
