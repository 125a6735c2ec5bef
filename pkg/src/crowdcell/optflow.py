"""Pyramidal iterative Lucas-Kanade optical flow over foreground pixels.

All pixels of a pyramid level are solved together: window sums of the
structure matrix and of the mismatch vector are box filters, and each
iteration warps the next frame with the current per-pixel estimate.  The
field is then read out at the foreground pixels of the earlier frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .validation import check_frame, check_mask

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class FlowConfig:
    window: int = 15
    levels: int = 3
    max_iterations: int = 10
    epsilon: float = 0.01
    # smaller eigenvalue of the window-averaged structure matrix, on [0, 1] intensities
    min_eigenvalue: float = 1e-4

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class FlowField:
    """Sparse flow: one (x, y, vx, vy) entry per foreground pixel."""

    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray

    def __len__(self):
        return len(self.x)

    def to_dense(self, shape):
        """Scatter into two (H, W) maps; pixels without an entry hold 0."""
        vx = np.zeros(shape)
        vy = np.zeros(shape)
        vx[self.y, self.x] = self.vx
        vy[self.y, self.x] = self.vy
        return vx, vy


def _smooth(image):
    out = ndimage.correlate1d(image, _BINOMIAL5, axis=0, mode="nearest")
    return ndimage.correlate1d(out, _BINOMIAL5, axis=1, mode="nearest")


def pyramid_depth(shape, levels, window):
    """Number of levels kept so that every level is at least ``window`` wide."""
    h, w = shape
    depth = 1
    while depth < levels:
        h, w = (h + 1) // 2, (w + 1) // 2
        if h < window or w < window:
            break
        depth += 1
    return depth


def build_pyramid(frame, levels, window=None):
    """Gaussian pyramid: level 0 is the frame, each further level is the
    previous one smoothed by a 5x5 binomial kernel and decimated by two.

    With ``window`` given, levels narrower than the window are dropped.
    """
    base = np.asarray(frame, dtype=np.float64)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if window is not None:
        levels = pyramid_depth(base.shape, levels, window)
    pyr = [base]
    for _ in range(levels - 1):
        pyr.append(_smooth(pyr[-1])[::2, ::2])
    return pyr


def _central_gradients(image):
    p = np.pad(image, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def _upsample_flow(flow, shape):
    h, w = shape
    up = np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)[:h, :w]
    return 2.0 * up


def _level_mask(mask, depth):
    """Per-level activity masks: a coarse pixel is active if any of the
    fine pixels it covers is foreground."""
    masks = [mask]
    for _ in range(depth - 1):
        m = masks[-1]
        h, w = m.shape
        padded = np.zeros((h + h % 2, w + w % 2), dtype=bool)
        padded[:h, :w] = m
        masks.append(padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).any(axis=(1, 3)))
    return masks


def _active_box(active, level, window, shape):
    """Bounding box of ``active`` at pyramid ``level``, padded by a margin
    wide enough that window sums and warps at active pixels never read
    past the box for displacements up to ``window`` pixels."""
    ys, xs = np.nonzero(active)
    if len(ys) == 0:
        return None
    margin = 2 * window
    scale = 2 ** level
    h, w = shape
    y0 = max(ys.min() // scale - margin, 0)
    y1 = min(ys.max() // scale + margin + 1, h)
    x0 = max(xs.min() // scale - margin, 0)
    x1 = min(xs.max() // scale + margin + 1, w)
    return slice(y0, y1), slice(x0, x1)


def dense_lucas_kanade(prev, nxt, cfg: FlowConfig = FlowConfig(), active=None):
    """Coarse-to-fine LK estimate at every pixel near ``active``.

    ``prev``/``nxt`` are float images scaled to [0, 1].  ``active`` selects
    the pixels of interest: computation is limited to their padded bounding
    box and iteration stops once all of them have converged.  Returns
    ``(vx, vy, degenerate)``; ``degenerate`` flags pixels whose level-0
    structure matrix fails the eigenvalue test, which carry (0, 0).  Pixels
    outside the box carry (0, 0) too.
    """
    if active is None:
        active = np.ones(prev.shape, dtype=bool)
    depth = pyramid_depth(prev.shape, cfg.levels, cfg.window)
    pyr_i = build_pyramid(prev, depth)
    pyr_j = build_pyramid(nxt, depth)
    actives = _level_mask(active, depth)
    box = lambda a: ndimage.uniform_filter(a, cfg.window, mode="nearest")

    vx = np.zeros(pyr_i[-1].shape)
    vy = np.zeros(pyr_i[-1].shape)
    degenerate = np.zeros(prev.shape, dtype=bool)
    for level in range(depth - 1, -1, -1):
        shape = pyr_i[level].shape
        if vx.shape != shape:
            vx, vy = _upsample_flow(vx, shape), _upsample_flow(vy, shape)
        roi = _active_box(active, level, cfg.window, shape)
        if roi is None:
            break
        img_i, img_j = pyr_i[level][roi], pyr_j[level][roi]
        ux, uy = vx[roi], vy[roi]
        h, w = img_i.shape

        gx, gy = _central_gradients(img_i)
        gxx, gxy, gyy = gx * gx, gx * gy, gy * gy
        sxx, sxy, syy = box(gxx), box(gxy), box(gyy)
        lam_min = 0.5 * (sxx + syy) - np.sqrt(0.25 * (sxx - syy) ** 2 + sxy * sxy)
        degen = lam_min < cfg.min_eigenvalue
        det = sxx * syy - sxy * sxy
        det[degen] = 1.0
        inv_xx, inv_xy, inv_yy = syy / det, -sxy / det, sxx / det

        rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
        todo = actives[level][roi] & ~degen
        for _ in range(cfg.max_iterations):
            warped = ndimage.map_coordinates(
                img_j, (rows + uy, cols + ux), order=1, mode="nearest"
            )
            diff = img_i - warped
            # Window sums of (I - J(q + u_q)) grad I, corrected to first order
            # so that every q in the window is evaluated at the centre
            # pixel's own displacement: sum grad I grad I' u_q is added back.
            bx = box(diff * gx + gxx * ux + gxy * uy)
            by = box(diff * gy + gxy * ux + gyy * uy)
            new_x = inv_xx * bx + inv_xy * by
            new_y = inv_xy * bx + inv_yy * by
            new_x[degen] = ux[degen]
            new_y[degen] = uy[degen]
            step = (new_x - ux) ** 2 + (new_y - uy) ** 2
            ux, uy = new_x, new_y
            todo &= step >= cfg.epsilon * cfg.epsilon
            if not todo.any():
                break
        vx[roi], vy[roi] = ux, uy
        if level == 0:
            degenerate[roi] = degen

    vx[degenerate] = 0.0
    vy[degenerate] = 0.0
    bound = (2 ** cfg.levels) * cfg.window
    norm = np.hypot(vx, vy)
    over = norm > bound
    if over.any():
        scale = bound / norm[over]
        vx[over] *= scale
        vy[over] *= scale
    return vx, vy, degenerate


def lucas_kanade(prev, nxt, mask, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Flow from ``prev`` to ``nxt`` at the foreground pixels of ``mask``."""
    prev = check_frame(prev, "prev")
    nxt = check_frame(nxt, "next")
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    mask = check_mask(mask, prev.shape)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        empty = np.zeros(0)
        return FlowField(xs, ys, empty, empty.copy())
    vx, vy, _ = dense_lucas_kanade(prev / 255.0, nxt / 255.0, cfg, active=mask)
    return FlowField(xs, ys, vx[ys, xs], vy[ys, xs])
