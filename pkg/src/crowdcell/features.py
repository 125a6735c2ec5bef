"""Per-cell motion, size and texture features.

Grid arrays are indexed ``[row, col] = [j, i]``; functions taking a single
cell use ``cell=(i, j)`` with ``i`` the column.  Absent values (cells with
no foreground) are NaN in the grid arrays and ``None`` in scalar results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import fft

from .ingest import CellGridSpec
from .optflow import FlowConfig, FlowField, dense_lucas_kanade

ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)


class SizeKernel:
    """3x3 weights for combining a cell's occupancy with its neighbours'."""

    def __init__(self, weights=None):
        if weights is None:
            weights = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (3, 3):
            raise ValueError(f"size kernel must be 3x3, got {w.shape}")
        if (w < 0).any() or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("size kernel weights must be non-negative and sum to 1")
        if not (np.allclose(w, w.T) and np.allclose(w, w[::-1, ::-1])):
            raise ValueError("size kernel must be symmetric")
        if w[1, 1] < w.max():
            raise ValueError("size kernel centre weight must be the maximum")
        self.weights = w

    def __repr__(self):
        return f"SizeKernel({self.weights.tolist()!r})"


@dataclass(frozen=True)
class GaborBank:
    """Quadrature Gabor pairs at 0, 45, 90 and 135 degrees.

    ``theta`` is the direction of the carrier's wave vector in image
    coordinates (x right, y down): theta=0 responds to intensity changes
    along x, i.e. vertical stripes.
    """

    ksize: int = 9
    wavelength: float = 4.0
    sigma: float = 2.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.ksize < 3 or self.ksize % 2 == 0:
            raise ValueError(f"ksize must be odd and >= 3, got {self.ksize}")
        if self.wavelength <= 0 or self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("wavelength, sigma and gamma must be positive")

    def kernels(self):
        """Complex kernels ``even + 1j * odd``, shape (4, ksize, ksize)."""
        return _gabor_kernels(self.ksize, self.wavelength, self.sigma, self.gamma)


@lru_cache(maxsize=16)
def _gabor_kernels(ksize, wavelength, sigma, gamma):
    r = ksize // 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    out = np.empty((len(ORIENTATIONS), ksize, ksize), dtype=np.complex128)
    for k, deg in enumerate(ORIENTATIONS):
        th = math.radians(deg)
        along = x * math.cos(th) + y * math.sin(th)
        across = -x * math.sin(th) + y * math.cos(th)
        env = np.exp(-(along**2 + (gamma * across) ** 2) / (2.0 * sigma**2))
        phase = 2.0 * math.pi * along / wavelength
        even = env * np.cos(phase)
        even -= even.mean()  # DC-free
        odd = env * np.sin(phase)  # antisymmetric, already zero-mean
        out[k] = even + 1j * odd
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def _kernel_spectra(bank: GaborBank, shape):
    kern = bank.kernels()
    k = bank.ksize
    spec = np.empty((len(kern),) + shape, dtype=np.complex128)
    for n, kv in enumerate(kern):
        padded = np.zeros(shape, dtype=np.complex128)
        # correlation kernel flipped into convolution form, centred at the origin
        padded[:k, :k] = kv[::-1, ::-1]
        padded = np.roll(padded, (-(k // 2), -(k // 2)), axis=(0, 1))
        spec[n] = fft.fft2(padded)
    spec.setflags(write=False)
    return spec


def gabor_responses(frame, bank: GaborBank = GaborBank()) -> np.ndarray:
    """Magnitude maps ``sqrt(even^2 + odd^2)``, shape (4, H, W).

    Intensities are scaled to [0, 1]; borders are edge-replicated.
    """
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"frame must be 2-D, got shape {img.shape}")
    if img.shape[0] < bank.ksize or img.shape[1] < bank.ksize:
        raise ValueError(
            f"frame {img.shape[1]}x{img.shape[0]} is smaller than the {bank.ksize}px kernel"
        )
    r = bank.ksize // 2
    h, w = img.shape
    padded = np.pad(img / 255.0, r, mode="edge")
    shape = (fft.next_fast_len(h + 2 * r), fft.next_fast_len(w + 2 * r))
    f_img = fft.fft2(padded, s=shape)
    resp = fft.ifft2(f_img[None] * _kernel_spectra(bank, shape), axes=(-2, -1))
    return np.abs(resp[:, r : r + h, r : r + w])


# ---------------------------------------------------------------------------
# Grid-wide feature computation


def cell_occupancy(mask, spec: CellGridSpec) -> np.ndarray:
    """Foreground pixel count per cell, shape (grid_h, grid_w)."""
    return spec.cell_sums(np.asarray(mask, dtype=np.int64))


def raw_motion_grid(vx, vy, mask, spec: CellGridSpec) -> np.ndarray:
    """Mean L1 flow norm over each cell's foreground pixels (NaN if none)."""
    mask = np.asarray(mask, dtype=bool)
    l1 = np.where(mask, np.abs(vx) + np.abs(vy), 0.0)
    total = spec.cell_sums(l1)
    count = cell_occupancy(mask, spec)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def smoothed_motion_grid(raw_prev, raw_cur, raw_next) -> np.ndarray:
    """Average of the present values among t-1, t, t+1 (NaN if all absent).

    ``raw_prev``/``raw_next`` may be None at sequence boundaries.
    """
    stack = [r for r in (raw_prev, raw_cur, raw_next) if r is not None]
    arr = np.stack(stack)
    present = ~np.isnan(arr)
    n = present.sum(axis=0)
    total = np.where(present, arr, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def size_grid(occupancy, kernel: SizeKernel = SizeKernel()) -> np.ndarray:
    """Weighted 3x3 neighbourhood occupancy; out-of-frame neighbours count as 0."""
    occ = np.asarray(occupancy, dtype=np.float64)
    p = np.pad(occ, 1, mode="constant")
    h, w = occ.shape
    out = np.zeros((h, w))
    g = kernel.weights
    for a in range(3):
        for b in range(3):
            out += g[a, b] * p[a : a + h, b : b + w]
    return out


def texture_grid(maps, spec: CellGridSpec, occupancy, mask=None, fg_only=False) -> np.ndarray:
    """Per-cell sums of the four magnitude maps, shape (4, grid_h, grid_w).

    Sums run over every pixel of the cell unless ``fg_only`` (then only
    foreground pixels of ``mask``).  Cells without foreground are NaN.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if fg_only:
        if mask is None:
            raise ValueError("fg_only texture sums need the foreground mask")
        maps = maps * np.asarray(mask, dtype=bool)[None]
    sums = spec.cell_sums(maps)
    return np.where(np.asarray(occupancy)[None] > 0, sums, np.nan)


# ---------------------------------------------------------------------------
# Single-cell operations


def raw_cell_motion(flow: FlowField, mask, spec: CellGridSpec, cell) -> Optional[float]:
    """Mean L1 norm of the flow over the cell's foreground pixels."""
    rows, cols = spec.cell_slice(cell)
    mask = np.asarray(mask, dtype=bool)
    n_fg = int(mask[rows, cols].sum())
    if n_fg == 0:
        return None
    inside = (
        (flow.y >= rows.start) & (flow.y < rows.stop) & (flow.x >= cols.start) & (flow.x < cols.stop)
    )
    inside &= mask[flow.y, flow.x]
    total = float(np.sum(np.abs(flow.vx[inside]) + np.abs(flow.vy[inside])))
    return total / n_fg


def smoothed_cell_motion(raw) -> Optional[float]:
    """Temporal average of the present raw motions at t-1, t, t+1."""
    present = [float(v) for v in raw if v is not None and not math.isnan(v)]
    if not present:
        return None
    return sum(present) / len(present)


def cell_size(occupancies, kernel: SizeKernel = SizeKernel()) -> float:
    """Weighted sum of a 3x3 block of occupancies (centre at [1, 1])."""
    occ = np.asarray(occupancies, dtype=np.float64)
    if occ.shape != (3, 3):
        raise ValueError("occupancies must be a 3x3 block")
    return float(np.sum(kernel.weights * occ))


def cell_texture(maps, spec: CellGridSpec, cell, occupancy, mask=None, fg_only=False):
    """Four per-orientation magnitude sums over the cell, or None if empty."""
    rows, cols = spec.cell_slice(cell)
    if occupancy < 1:
        return None
    block = np.asarray(maps, dtype=np.float64)[:, rows, cols]
    if fg_only:
        block = block * np.asarray(mask, dtype=bool)[rows, cols][None]
    return block.sum(axis=(1, 2))


@dataclass
class CellFeatures:
    mot: Optional[float]
    size: float
    txt: Optional[np.ndarray]
    occupancy: int


# ---------------------------------------------------------------------------
# Whole-sequence extraction


@dataclass
class SequenceFeatures:
    """Feature volumes for one sequence; NaN marks absent values.

    mot, size: (T, gh, gw); txt: (T, 4, gh, gw); occupancy: (T, gh, gw) int.
    """

    mot: np.ndarray
    size: np.ndarray
    txt: np.ndarray
    occupancy: np.ndarray

    def __len__(self):
        return len(self.mot)

    def cell(self, t, cell) -> CellFeatures:
        i, j = cell
        occ = int(self.occupancy[t, j, i])
        mot = self.mot[t, j, i]
        txt = self.txt[t, :, j, i]
        return CellFeatures(
            None if np.isnan(mot) else float(mot),
            float(self.size[t, j, i]),
            None if occ == 0 else txt.copy(),
            occ,
        )


@dataclass(frozen=True)
class FeatureConfig:
    cell_size: int = 16
    flow: FlowConfig = FlowConfig()
    gabor: GaborBank = GaborBank()
    size_kernel: SizeKernel = SizeKernel()
    texture_fg_only: bool = False


def frame_flow(prev, nxt, mask, flow_cfg: FlowConfig):
    """Dense (vx, vy) maps holding flow at the foreground pixels of ``prev``."""
    if not mask.any():
        z = np.zeros(prev.shape)
        return z, z.copy()
    vx, vy, _ = dense_lucas_kanade(prev / 255.0, nxt / 255.0, flow_cfg, active=mask)
    return np.where(mask, vx, 0.0), np.where(mask, vy, 0.0)


def extract_features(frames, masks, cfg: FeatureConfig = FeatureConfig()) -> SequenceFeatures:
    """Compute motion, size and texture volumes for a whole sequence.

    Flow for frame t is measured t -> t+1, so the last frame has no raw
    motion of its own; its smoothed motion uses t-1 only.
    """
    frames = np.asarray(frames)
    masks = np.asarray(masks, dtype=bool)
    if frames.shape != masks.shape:
        raise ValueError(f"frames {frames.shape} and masks {masks.shape} differ in shape")
    n, h, w = frames.shape
    spec = CellGridSpec.for_frame(w, h, cfg.cell_size)
    gh, gw = spec.shape

    occ = np.empty((n, gh, gw), dtype=np.int64)
    raw = np.full((n, gh, gw), np.nan)
    size = np.empty((n, gh, gw))
    txt = np.full((n, 4, gh, gw), np.nan)
    for t in range(n):
        occ[t] = cell_occupancy(masks[t], spec)
        size[t] = size_grid(occ[t], cfg.size_kernel)
        if t + 1 < n:
            vx, vy = frame_flow(frames[t], frames[t + 1], masks[t], cfg.flow)
            raw[t] = raw_motion_grid(vx, vy, masks[t], spec)
        if occ[t].any():
            maps = gabor_responses(frames[t], cfg.gabor)
            txt[t] = texture_grid(maps, spec, occ[t], masks[t], cfg.texture_fg_only)

    mot = np.empty_like(raw)
    for t in range(n):
        mot[t] = smoothed_motion_grid(
            raw[t - 1] if t > 0 else None, raw[t], raw[t + 1] if t + 1 < n else None
        )
    return SequenceFeatures(mot, size, txt, occ)
