"""Input validation helpers shared by the estimators."""

import numpy as np

from .ingest import FrameSequence


def check_frame(frame, name="frame"):
    """Return ``frame`` as a 2-D uint8 array, or raise ValueError."""
    arr = np.asarray(frame)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is empty")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number):
            raise ValueError(f"{name} must be numeric, got {arr.dtype}")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"{name} values fall outside the 8-bit range")
        arr = arr.astype(np.uint8)
    return arr


def check_mask(mask, shape=None, name="mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr.astype(bool, copy=False)


def check_frames(frames, min_len=1, name="frames"):
    """Accept a FrameSequence, a (T, H, W) array or a list of 2-D frames."""
    if isinstance(frames, FrameSequence):
        arr = frames.frames
    elif isinstance(frames, np.ndarray):
        arr = frames
    else:
        arr = np.stack([check_frame(f, name) for f in frames]) if len(frames) else np.empty((0, 0, 0))
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a (T, H, W) stack, got shape {arr.shape}")
    if len(arr) < min_len:
        raise ValueError(f"{name}: need at least {min_len} frames, got {len(arr)}")
    if arr.dtype != np.uint8:
        arr = np.stack([check_frame(f, name) for f in arr])
    return arr


def check_sequences(X, name="X"):
    """Normalise a single sequence or a list of sequences to a list of stacks."""
    if isinstance(X, (FrameSequence, np.ndarray)):
        return [check_frames(X, name=name)]
    seqs = list(X)
    if not seqs:
        raise ValueError(f"{name}: no sequences given")
    if all(np.ndim(s) == 2 for s in seqs):
        return [check_frames(seqs, name=name)]
    return [check_frames(s, name=name) for s in seqs]
