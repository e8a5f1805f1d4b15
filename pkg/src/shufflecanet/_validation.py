"""Input checks shared by the estimators and pipeline entry points."""
from __future__ import annotations

import numpy as np


def check_image(image, name="image") -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be H x W x 3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and (arr.min() < 0 or arr.max() > 255):
            raise ValueError(f"{name} values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def check_images(images) -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    return [check_image(im, f"image {i}") for i, im in enumerate(images)]


def check_annotations(ann, num_classes=None, width=None, height=None) -> np.ndarray:
    """Rows (class, x1, y1, x2, y2); boxes must be non-empty and in bounds."""
    arr = np.asarray(ann, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 5)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError(f"annotations must be rows of (class, x1, y1, x2, y2), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("annotations contain non-finite values")
    if ((arr[:, 3] <= arr[:, 1]) | (arr[:, 4] <= arr[:, 2])).any():
        raise ValueError("annotation boxes need x1 < x2 and y1 < y2")
    if num_classes is not None and ((arr[:, 0] < 0) | (arr[:, 0] >= num_classes) | (arr[:, 0] % 1 != 0)).any():
        raise ValueError(f"class ids must be integers in [0, {num_classes})")
    if width is not None and ((arr[:, 1] < 0) | (arr[:, 3] > width)).any():
        raise ValueError("annotation boxes exceed the image width")
    if height is not None and ((arr[:, 2] < 0) | (arr[:, 4] > height)).any():
        raise ValueError("annotation boxes exceed the image height")
    return arr


def check_wh(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (N, 2) width/height rows, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError("no boxes given")
    if (arr <= 0).any() or not np.isfinite(arr).all():
        raise ValueError("box widths and heights must be positive and finite")
    return arr
