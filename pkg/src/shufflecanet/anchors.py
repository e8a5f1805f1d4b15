"""k-means anchor clustering under the 1 - IoU distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_wh


def wh_iou(boxes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of origin-anchored (w, h) boxes, (N, 2) x (K, 2) -> (N, K)."""
    inter = np.minimum(boxes[:, None, 0], centroids[None, :, 0]) * np.minimum(boxes[:, None, 1], centroids[None, :, 1])
    union = (boxes[:, 0] * boxes[:, 1])[:, None] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple          # 9 (w, h) pairs, ascending area
    iterations: int
    inertia: tuple          # total 1 - IoU after each assignment step

    def levels(self):
        return [self.anchors[i:i + 3] for i in (0, 3, 6)]


def _farthest_point_init(boxes, k, rng):
    centroids = [boxes[rng.integers(len(boxes))]]
    for _ in range(1, k):
        d = 1.0 - wh_iou(boxes, np.asarray(centroids)).max(axis=1)
        centroids.append(boxes[int(np.argmax(d))])
    return np.array(centroids, dtype=np.float64)


def _cost(members, centroid) -> float:
    return float((1.0 - wh_iou(members, centroid[None, :])).sum())


def lloyd_iou(boxes: np.ndarray, k: int, seed: int = 0, max_iter: int = 300):
    """Returns (centroids unsorted, labels, iterations, inertia history)."""
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_init(boxes, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = 1.0 - wh_iou(boxes, centroids)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(boxes)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = boxes[labels == c]
            if len(members):
                # the mean is not the 1 - IoU minimiser; keep the old centroid if it serves the cluster better
                mean = members.mean(axis=0)
                if _cost(members, mean) <= _cost(members, centroids[c]):
                    centroids[c] = mean
            else:
                # re-seed an empty cluster on the worst-served box
                worst = int(np.argmax(dist[np.arange(len(boxes)), labels]))
                centroids[c] = boxes[worst]
    return centroids, labels, it, history


def kmeans_anchors(boxes, k: int = 9, seed: int = 0, max_iter: int = 300) -> AnchorSet:
    boxes = check_wh(boxes)
    if len(np.unique(boxes, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct box sizes, got {len(np.unique(boxes, axis=0))}")
    centroids, _, it, hist = lloyd_iou(boxes, k, seed, max_iter)
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    return AnchorSet(tuple((float(w), float(h)) for w, h in centroids[order]), it, tuple(hist))


def mean_best_iou(boxes, anchors) -> float:
    """Average over boxes of the IoU with their best-fitting anchor."""
    boxes = check_wh(boxes)
    return float(wh_iou(boxes, np.asarray(anchors, dtype=np.float64)).max(axis=1).mean())


class AnchorKMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on (w, h) rows, ``predict`` the nearest anchor."""

    def __init__(self, n_clusters=9, max_iter=300, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        result = kmeans_anchors(X, self.n_clusters, self.random_state, self.max_iter)
        self.cluster_centers_ = np.asarray(result.anchors)
        self.n_iter_ = result.iterations
        self.inertia_history_ = np.asarray(result.inertia)
        self.inertia_ = float(self.inertia_history_[-1])
        self.labels_ = self.predict(X)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return (1.0 - wh_iou(check_wh(X), self.cluster_centers_)).argmin(axis=1)

    @property
    def anchors_(self):
        check_is_fitted(self, "cluster_centers_")
        return [tuple(map(tuple, self.cluster_centers_[i:i + 3])) for i in (0, 3, 6)] \
            if self.n_clusters == 9 else [tuple(map(tuple, self.cluster_centers_))]
