"""scikit-learn style wrapper around configuration, anchor fitting and training."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_annotations, check_images
from .anchors import kmeans_anchors
from .config import RunConfig, desk_config
from .data import Sample, letterbox_sample
from .metrics import evaluate
from .model import Detector
from .pipeline import detect
from .train import train


class MaskDetector(BaseEstimator):
    """Detector estimator.

    ``fit(X, y)`` takes a list of H x W x 3 uint8 images and, per image, an
    array of ``(class, x1, y1, x2, y2)`` rows in pixels. ``predict`` returns
    per-image arrays of ``(x1, y1, x2, y2, score, class)``; ``score`` is
    mAP@0.5.
    """

    def __init__(self, class_names=("face", "mask"), input_size=64, backbone="shufflecanet", neck="bifpn",
                 loss="alpha-ciou", epochs=500, batch_size=8, lr0=0.1, box_gain=1.0, fit_anchors=True,
                 mosaic=0.0, conf_threshold=0.25, iou_threshold=0.45, random_state=0):
        self.class_names = class_names
        self.input_size = input_size
        self.backbone = backbone
        self.neck = neck
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.box_gain = box_gain
        self.fit_anchors = fit_anchors
        self.mosaic = mosaic
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.random_state = random_state

    def _samples(self, X, y):
        images = check_images(X)
        if len(images) != len(y):
            raise ValueError(f"{len(images)} images but {len(y)} annotation arrays")
        nc = len(self.class_names)
        return [Sample(im, check_annotations(a, nc, im.shape[1], im.shape[0]), f"sample-{i}")
                for i, (im, a) in enumerate(zip(images, y))]

    def build_config(self, samples=None) -> RunConfig:
        anchors = None
        if self.fit_anchors and samples:
            wh = np.concatenate([_wh(letterbox_sample(s, self.input_size)[0].annotations) for s in samples])
            if len(np.unique(wh, axis=0)) >= 9:
                anchors = kmeans_anchors(wh, 9, seed=self.random_state).anchors
        cfg = desk_config(len(self.class_names), self.class_names, self.input_size, anchors=anchors,
                          epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0)
        cfg = cfg.with_ablation(self.backbone, self.neck, self.loss)
        return replace(cfg, seed=self.random_state,
                       loss=replace(cfg.loss, box_gain=self.box_gain),
                       data=replace(cfg.data, mosaic=self.mosaic),
                       detect=replace(cfg.detect, conf_threshold=self.conf_threshold,
                                      iou_threshold=self.iou_threshold))

    def fit(self, X, y, max_steps=None):
        samples = self._samples(X, y)
        if not samples:
            raise ValueError("cannot fit on an empty dataset")
        self.config_ = self.build_config(samples)
        self.model_ = Detector(self.config_.model, seed=self.random_state)
        self.history_ = train(self.model_, samples, self.config_, max_steps=max_steps)
        return self

    def predict(self, X, conf_threshold=None):
        check_is_fitted(self, "model_")
        thr = self.conf_threshold if conf_threshold is None else conf_threshold
        return detect(self.model_, check_images(X), thr, self.iou_threshold)

    def score(self, X, y) -> float:
        samples = self._samples(X, y)
        preds = self.predict([s.image for s in samples], conf_threshold=self.config_.detect.eval_conf_threshold)
        report = evaluate(preds, [s.annotations for s in samples], len(self.class_names), self.class_names,
                          conf_threshold=self.conf_threshold)
        return report.map


def _wh(ann: np.ndarray) -> np.ndarray:
    return np.column_stack([ann[:, 3] - ann[:, 1], ann[:, 4] - ann[:, 2]])
