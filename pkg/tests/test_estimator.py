import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bpim.data import SyntheticSpec, render_scene
from bpim.estimator import BPIMDetector, check_images, check_labels

TOY = dict(width_multiple=0.0625, input_size=64, heads=2, ff_dim=32, epochs=1, batch_size=4)


def scenes(n=4, size=64):
    spec = SyntheticSpec(seed=0, num_images=n, image_size=size)
    out = [render_scene(spec, i) for i in range(n)]
    X = [s.image for s in out]
    y = [np.array([[c, b.cx, b.cy, b.w, b.h] for c, b in s.boxes]).reshape(-1, 5) for s in out]
    return X, y


def test_get_params_round_trip():
    est = BPIMDetector(**TOY)
    params = est.get_params()
    assert params["width_multiple"] == 0.0625 and params["big"] is True
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(big=False)
    assert est.big is False


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        BPIMDetector(**TOY).predict(np.zeros((3, 64, 64), np.float32))


def test_fit_predict_score():
    X, y = scenes()
    est = BPIMDetector(conf_threshold=0.0, **TOY).fit(X, y)
    assert len(est.history_) == 1
    out = est.predict(X)
    assert len(out) == 4 and all(o.shape[1] == 6 for o in out)
    s = est.score(X, y)
    assert 0.0 <= s <= 1.0


def test_predict_maps_back_to_input_frame():
    X, y = scenes()
    est = BPIMDetector(conf_threshold=0.0, **TOY).fit(X, y)
    wide = np.zeros((3, 32, 64), np.float32)
    det = est.predict(wide)[0]
    assert len(det) and det.shape[1] == 6
    # coordinates are normalized to the 64x32 input, not the square letterbox
    x1, y1 = det[:, 0] - det[:, 2] / 2, det[:, 1] - det[:, 3] / 2
    x2, y2 = det[:, 0] + det[:, 2] / 2, det[:, 1] + det[:, 3] / 2
    assert (x1 >= -1e-6).all() and (y1 >= -1e-6).all() and (x2 <= 1 + 1e-6).all() and (y2 <= 1 + 1e-6).all()
    assert det[:, 1].max() > 0.75 or det[:, 1].min() < 0.25 or det[:, 3].max() > 0.5


def test_check_images():
    assert len(check_images(np.zeros((2, 3, 8, 8)))) == 2
    assert len(check_images(np.zeros((3, 8, 8)))) == 1
    with pytest.raises(ValueError):
        check_images(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        check_images([np.full((3, 4, 4), 2.0)])
    with pytest.raises(ValueError):
        check_images([np.full((3, 4, 4), np.nan)])
    with pytest.raises(ValueError):
        check_images([np.zeros((1, 4, 4))])
    with pytest.raises(ValueError):
        check_images([])


def test_check_labels():
    ok = check_labels([[[0, 0.5, 0.5, 0.1, 0.1]], []], 2, 2)
    assert ok[0].shape == (1, 5) and ok[1].shape == (0, 5)
    with pytest.raises(ValueError):
        check_labels([[[2, 0.5, 0.5, 0.1, 0.1]]], 1, 2)
    with pytest.raises(ValueError):
        check_labels([[[0, 0.5, 0.5, 0.0, 0.1]]], 1, 2)
    with pytest.raises(ValueError):
        check_labels([], 1, 2)
