"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .dataset import ImageRecord
from .querygen import normalize


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Return ``X`` as a float64 ``(N, H, W, 3)`` array with values in [0, 1].

    A single ``(H, W, 3)`` image is promoted to a batch of one.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_records(records) -> list[ImageRecord]:
    records = list(records)
    if not records:
        raise ValueError("need at least one annotated image")
    for r in records:
        if not isinstance(r, ImageRecord):
            raise TypeError(f"expected ImageRecord, got {type(r).__name__}")
    return records


def check_queries(queries: Sequence[str] | str) -> list[str]:
    if isinstance(queries, str):
        queries = [queries]
    out = [str(q) for q in queries]
    if not out:
        raise ValueError("need at least one query")
    for q in out:
        if not normalize(q):
            raise ValueError(f"query {q!r} has no words")
    return out


def check_threshold(threshold: float) -> float:
    threshold = float(threshold)
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return threshold


def check_box_xyxy(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64).reshape(-1)
    if b.shape != (4,) or not np.all(np.isfinite(b)):
        raise ValueError(f"box must be four finite numbers, got {box!r}")
    if not (b[2] > b[0] and b[3] > b[1]):
        raise ValueError("box must have x1 > x0 and y1 > y0")
    return b
