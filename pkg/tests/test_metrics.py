import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bpim.metrics import IOU_THRESHOLDS, average_precision, evaluate_detections, match_image

GT_A = [0, 0.2, 0.2, 0.2, 0.2]
GT_B = [0, 0.5, 0.5, 0.2, 0.2]
GT_C = [0, 0.7, 0.7, 0.2, 0.2]


def det(cx, cy, w, h, conf, cls=0):
    return [cx, cy, w, h, conf, cls]


def pr_fixture(shift=0.0):
    """Four images: TP at 0.9, FP at 0.8 on an empty image, TP at 0.7, one missed box."""
    dets = [
        torch.tensor([det(0.2, 0.2, 0.2, 0.2, 0.9)]),
        torch.tensor([det(0.4, 0.4, 0.1, 0.1, 0.8)]),
        torch.tensor([det(0.5 + shift, 0.5, 0.2, 0.2, 0.7)]),
        torch.zeros(0, 6),
    ]
    gts = [torch.tensor([GT_A]), torch.zeros(0, 5), torch.tensor([GT_B]), torch.tensor([GT_C])]
    return dets, gts


def test_hand_integrated_ap():
    # precision envelope 1 up to recall 1/3 (34 points), 2/3 up to 2/3 (33 points), then 0
    res = evaluate_detections(*pr_fixture(), num_classes=1)
    assert res.map50 == pytest.approx(56 / 101, abs=1e-12)
    assert res.map5095 == pytest.approx(56 / 101, abs=1e-12)
    assert round(res.map50, 6) == 0.554455


def test_threshold_dependent_fixture():
    # IoU of the third detection: (0.2 - d) / (0.2 + d) = 0.72, a TP up to the 0.70 threshold only
    d = 0.2 * 0.28 / 1.72
    res = evaluate_detections(*pr_fixture(shift=d), num_classes=1)
    assert res.map50 == pytest.approx(56 / 101, abs=1e-12)
    assert res.map5095 == pytest.approx((5 * 56 + 5 * 34) / 1010, abs=1e-12)


def test_perfect_predictions():
    gts = [torch.tensor([GT_A, [1, 0.6, 0.6, 0.1, 0.3]]), torch.tensor([GT_C])]
    dets = [torch.tensor([[*g[1:], 0.9, g[0]] for g in gt.tolist()]) for gt in gts]
    res = evaluate_detections(dets, gts, num_classes=2)
    assert res.map50 == 1.0 and res.map5095 == 1.0
    assert res.per_class_ap == {0: 1.0, 1: 1.0}


def test_no_predictions():
    res = evaluate_detections([torch.zeros(0, 6)], [torch.tensor([GT_A])], num_classes=1)
    assert res.map50 == 0.0 and res.map5095 == 0.0


def test_absent_class_excluded():
    gts = [torch.tensor([GT_A])]
    dets = [torch.tensor([det(0.2, 0.2, 0.2, 0.2, 0.9), det(0.8, 0.8, 0.1, 0.1, 0.5, cls=1)])]
    res = evaluate_detections(dets, gts, num_classes=3)
    assert res.per_class_ap == {0: 1.0}


def test_ap_oracles():
    assert average_precision([True], 1) == 1.0
    assert average_precision([], 3) == 0.0
    # one TP out of two boxes: precision 1 up to recall 0.5 (51 points)
    assert average_precision([True], 2) == pytest.approx(51 / 101)
    # FP first: precision 1/2 at recall 1
    assert average_precision([False, True], 1) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        average_precision([True], 0)


def test_greedy_matching_one_to_one():
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
    d = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])
    assert match_image(d, gt, 0.5).tolist() == [True, False]
    assert match_image(d, torch.zeros(0, 4), 0.5).tolist() == [False, False]


def test_mismatched_lengths():
    with pytest.raises(ValueError):
        evaluate_detections([torch.zeros(0, 6)], [], 1)


boxes = st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.02, 0.2), st.floats(0.02, 0.2))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(boxes, min_size=1, max_size=6),
    st.lists(st.tuples(boxes, st.floats(0.01, 1.0)), max_size=8),
    st.floats(0.0, 0.05),
)
def test_map5095_never_exceeds_map50(gt_boxes, pred, jitter):
    gt = torch.tensor([[0, *b] for b in gt_boxes], dtype=torch.float32)
    rows = [[b[0] + jitter, b[1], b[2], b[3], c, 0] for b, c in pred]
    rows += [[*b, 0.5, 0] for b in gt_boxes[::2]]
    res = evaluate_detections([torch.tensor(rows, dtype=torch.float32)], [gt], 1)
    assert 0.0 <= res.map5095 <= res.map50 <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(1, 15))
def test_extra_top_ranked_hit_never_hurts(flags, extra_gt):
    num_gt = sum(flags) + extra_gt
    base = average_precision(flags, num_gt)
    assert average_precision([True] + flags, num_gt) >= base - 1e-12


def test_thresholds():
    assert len(IOU_THRESHOLDS) == 10
    np.testing.assert_allclose(IOU_THRESHOLDS, [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95])
