"""Foreground segmentation: temporal-median background plus fixed threshold.

Any other segmentation method can be plugged in by writing its masks as
PGM files and loading them with :func:`load_external_masks`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ingest import DEFAULT_PATTERN, list_frames, load_images
from .validation import check_frame, check_frames

DEFAULT_THRESHOLD = 30


@dataclass(frozen=True)
class BackgroundModel:
    background: np.ndarray
    threshold: int = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 1 <= self.threshold <= 254:
            raise ValueError(f"threshold must lie in [1, 254], got {self.threshold}")
        if self.background.ndim != 2:
            raise ValueError("background must be a 2-D image")

    @property
    def width(self):
        return self.background.shape[1]

    @property
    def height(self):
        return self.background.shape[0]


def train_background(frames, threshold=DEFAULT_THRESHOLD) -> BackgroundModel:
    """Per-pixel temporal median (lower median for even counts)."""
    stack = check_frames(frames, name="training frames")
    if len(stack) < 3:
        raise ValueError(f"need at least 3 frames to train a background, got {len(stack)}")
    k = (len(stack) - 1) // 2
    background = np.partition(stack, k, axis=0)[k]
    return BackgroundModel(np.ascontiguousarray(background), int(threshold))


def median3x3(mask):
    """3x3 binary median with edge replication (majority of nine)."""
    m = np.pad(mask.astype(np.uint8), 1, mode="edge")
    h, w = mask.shape
    count = np.zeros((h, w), dtype=np.uint8)
    for dy in range(3):
        for dx in range(3):
            count += m[dy : dy + h, dx : dx + w]
    return count >= 5


def segment(frame, model: BackgroundModel) -> np.ndarray:
    """Return a boolean foreground mask for ``frame``."""
    frame = check_frame(frame)
    if frame.shape != model.background.shape:
        raise ValueError(
            f"frame shape {frame.shape} does not match background {model.background.shape}"
        )
    diff = np.abs(frame.astype(np.int16) - model.background.astype(np.int16))
    return median3x3(diff > model.threshold)


def load_external_masks(dir_path, pattern=DEFAULT_PATTERN) -> list:
    """Load P5 masks in filename order; any nonzero pixel is foreground."""
    stack = load_images(list_frames(dir_path, pattern))
    return list(stack != 0)


class MedianBackgroundSubtractor(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns the median background, ``transform``
    maps a (T, H, W) frame stack to a boolean mask stack."""

    def __init__(self, threshold=DEFAULT_THRESHOLD):
        self.threshold = threshold

    def fit(self, X, y=None):
        self.model_ = train_background(X, self.threshold)
        self.background_ = self.model_.background
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        stack = check_frames(X)
        return np.stack([segment(f, self.model_) for f in stack])
