"""Scikit-learn style wrapper around training and inference."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import AnnotatedImage, letterbox
from .geometry import Box
from .metrics import evaluate_detections
from .model import BPIMNet, ModelConfig
from .train import TrainConfig, predict, train


def check_images(X) -> list[np.ndarray]:
    """Accept one ``[3, H, W]`` array, a ``[N, 3, H, W]`` stack or a list of arrays.

    Values must be finite and lie in ``[0, 1]``.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    if isinstance(X, np.ndarray):
        if X.ndim == 3:
            X = [X]
        elif X.ndim == 4:
            X = list(X)
        else:
            raise ValueError(f"expected [3, H, W] or [N, 3, H, W] images, got shape {X.shape}")
    out = []
    for i, img in enumerate(X):
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"image {i} has shape {img.shape}, expected [3, H, W]")
        if not np.isfinite(img).all():
            raise ValueError(f"image {i} contains non-finite values")
        if img.min() < 0 or img.max() > 1:
            raise ValueError(f"image {i} has values outside [0, 1]")
        out.append(img)
    if not out:
        raise ValueError("no images given")
    return out


def check_labels(y, n_images: int, num_classes: int) -> list[np.ndarray]:
    """One ``[m, 5]`` array of ``class, cx, cy, w, h`` rows per image."""
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} label arrays for {n_images} images")
    out = []
    for i, lab in enumerate(y):
        lab = np.asarray(lab, dtype=np.float64).reshape(-1, 5)
        for row in lab:
            c = row[0]
            if c != int(c) or not 0 <= c < num_classes:
                raise ValueError(f"image {i}: class {c} outside [0, {num_classes})")
            Box(*row[1:]).validate()
        out.append(lab)
    return out


class BPIMDetector(BaseEstimator):
    """Detector with ``fit`` / ``predict`` / ``score``.

    ``X`` is a list of ``[3, H, W]`` float images in ``[0, 1]``; ``y`` is a
    list of ``[m, 5]`` label arrays (``class, cx, cy, w, h``, normalized).
    ``predict`` returns one ``[n, 6]`` array per image (``cx, cy, w, h, conf,
    class``) in the frame of the input image.
    """

    def __init__(
        self,
        width_multiple=0.25,
        depth_multiple=0.33,
        num_classes=2,
        big=True,
        awf=True,
        pig=True,
        csf_tff=True,
        heads=8,
        ff_dim=1024,
        input_size=640,
        epochs=100,
        batch_size=8,
        lr0=0.01,
        conf_threshold=0.25,
        iou_nms=0.45,
        seed=0,
    ):
        self.width_multiple = width_multiple
        self.depth_multiple = depth_multiple
        self.num_classes = num_classes
        self.big = big
        self.awf = awf
        self.pig = pig
        self.csf_tff = csf_tff
        self.heads = heads
        self.ff_dim = ff_dim
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.conf_threshold = conf_threshold
        self.iou_nms = iou_nms
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            width_multiple=self.width_multiple,
            depth_multiple=self.depth_multiple,
            num_classes=self.num_classes,
            big=self.big,
            awf=self.awf,
            pig=self.pig,
            csf_tff=self.csf_tff,
            heads=self.heads,
            ff_dim=self.ff_dim,
            input_size=self.input_size,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr0=self.lr0,
            warmup_epochs=min(3, self.epochs),
            seed=self.seed,
        )

    def fit(self, X, y):
        images = check_images(X)
        labels = check_labels(y, len(images), self.num_classes)
        items = [
            AnnotatedImage(img, [(int(r[0]), Box(*r[1:])) for r in lab], f"img_{i}")
            for i, (img, lab) in enumerate(zip(images, labels))
        ]
        res = train(self._model_config(), self._train_config(), items)
        self.model_: BPIMNet = res.model
        self.history_ = res.history
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        out = []
        for img in check_images(X):
            boxed, tf = letterbox(img, self.input_size)
            det = predict(self.model_, torch.from_numpy(boxed)[None], self.conf_threshold, self.iou_nms)[0].numpy()
            rows = []
            for cx, cy, w, h, conf, cls in det:
                try:
                    b = tf.inverse(Box(float(cx), float(cy), float(w), float(h))).clip()
                except ValueError:
                    continue  # box lies entirely in the padding
                rows.append([b.cx, b.cy, b.w, b.h, conf, cls])
            out.append(np.asarray(rows, dtype=np.float32).reshape(-1, 6))
        return out

    def score(self, X, y) -> float:
        """mAP@.5 on ``(X, y)``, scored with the confidence floor used for evaluation."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        labels = check_labels(y, len(images), self.num_classes)
        saved = self.conf_threshold
        try:
            self.conf_threshold = 0.001
            dets = self.predict(images)
        finally:
            self.conf_threshold = saved
        res = evaluate_detections([torch.from_numpy(d) for d in dets], [torch.from_numpy(l).float() for l in labels], self.num_classes)
        return res.map50
