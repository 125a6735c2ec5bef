"""Frame-level and pixel-level evaluation, plus synthetic test scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .exceptions import ScenarioError
from .ingest import CellGridSpec, FrameSequence

HIT_FRACTION = 0.40


@dataclass
class RocCurve:
    """Operating points ordered by increasing threshold.

    A frame is predicted anomalous at threshold T iff its score < T, so the
    false positive rate rises and the false negative rate falls with T.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    fnr: np.ndarray
    eer: float
    eer_fpr: float = math.nan
    eer_fnr: float = math.nan

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.fnr.tolist()))


def equal_error_rate(fpr, fnr):
    """EER by linear interpolation at the first sign change of FNR - FPR.

    Returns ``(eer, fpr_at_eer, fnr_at_eer)``.
    """
    fpr = np.asarray(fpr, dtype=np.float64)
    fnr = np.asarray(fnr, dtype=np.float64)
    d = fnr - fpr
    for k in range(len(d)):
        if d[k] == 0.0:
            return float(fpr[k]), float(fpr[k]), float(fnr[k])
        if k + 1 < len(d) and d[k] > 0.0 > d[k + 1]:
            a = d[k] / (d[k] - d[k + 1])
            x = fpr[k] + a * (fpr[k + 1] - fpr[k])
            y = fnr[k] + a * (fnr[k + 1] - fnr[k])
            return float(0.5 * (x + y)), float(x), float(y)
    raise ValueError("FNR - FPR never changes sign; the sweep is incomplete")


def _check_labels(gt):
    gt = np.asarray(gt, dtype=bool).ravel()
    n_pos = int(gt.sum())
    if n_pos == 0 or n_pos == len(gt):
        raise ValueError("ground truth must contain both anomalous and normal frames")
    return gt


def frame_roc(frame_scores, gt) -> RocCurve:
    """Sweep T over the distinct scores (plus -inf / +inf)."""
    scores = np.asarray(frame_scores, dtype=np.float64).ravel()
    gt = _check_labels(gt)
    if len(scores) != len(gt):
        raise ValueError(f"{len(scores)} scores for {len(gt)} ground-truth flags")
    if np.isnan(scores).any():
        raise ValueError("frame scores contain NaN")
    finite = np.unique(scores[np.isfinite(scores)])
    thresholds = np.concatenate([[-np.inf], finite, [np.inf]])
    pos = np.sort(scores[gt])
    neg = np.sort(scores[~gt])
    # number of scores strictly below each threshold
    tp = np.searchsorted(pos, thresholds, side="left")
    fp = np.searchsorted(neg, thresholds, side="left")
    # +inf scores (nothing analysed) are only reached by the +inf sentinel
    tp[-1] = len(pos)
    fp[-1] = len(neg)
    fpr = fp / len(neg)
    fnr = 1.0 - tp / len(pos)
    eer, ef, en = equal_error_rate(fpr, fnr)
    return RocCurve(thresholds, fpr, fnr, eer, ef, en)


def localization_hit(detected, gt_pixels) -> bool:
    """True when at least 40% of the detected pixels are ground-truth pixels."""
    det = np.asarray(detected, dtype=bool)
    gt = np.asarray(gt_pixels, dtype=bool)
    if det.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {det.shape} vs {gt.shape}")
    n_det = int(det.sum())
    if n_det == 0:
        return False
    return int(np.count_nonzero(det & gt)) >= HIT_FRACTION * n_det


def localization_rates(detections, gt_masks):
    """(FPR, FNR) for one threshold.

    FNR is the fraction of frames with ground-truth anomalies that are not
    hit; FPR the fraction of normal frames with any detection.
    """
    pos = neg = miss = false_alarm = 0
    for det, gt in zip(detections, gt_masks):
        gt = np.asarray(gt, dtype=bool)
        det = np.asarray(det, dtype=bool)
        if gt.any():
            pos += 1
            miss += not localization_hit(det, gt)
        else:
            neg += 1
            false_alarm += bool(det.any())
    if pos == 0 or neg == 0:
        raise ValueError("ground truth must contain both anomalous and normal frames")
    return false_alarm / neg, miss / pos


def localization_roc_from_masks(masks_by_threshold, gt_masks) -> RocCurve:
    """ROC from precomputed detections: ``{T: [mask per frame]}``."""
    gt_masks = list(gt_masks)
    ts = sorted(masks_by_threshold)
    rates = [localization_rates(masks_by_threshold[t], gt_masks) for t in ts]
    fpr = np.array([r[0] for r in rates])
    fnr = np.array([r[1] for r in rates])
    eer, ef, en = equal_error_rate(fpr, fnr)
    return RocCurve(np.array(ts, dtype=np.float64), fpr, fnr, eer, ef, en)


def localization_roc(cell_scores, gt_masks, spec: CellGridSpec) -> RocCurve:
    """Pixel-level ROC: at each T, cells scoring below T are expanded to
    pixel blocks and judged against the ground-truth masks."""
    cell_scores = np.asarray(cell_scores, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=bool)
    if len(gt) != len(cell_scores):
        raise ValueError(f"{len(cell_scores)} score grids for {len(gt)} ground-truth masks")
    gt = spec.crop(gt)
    finite = np.unique(cell_scores[np.isfinite(cell_scores)])
    thresholds = np.concatenate([[-np.inf], finite, [np.inf]])
    n = spec.cell_size
    gt_any = gt.reshape(len(gt), -1).any(axis=1)
    # per-cell ground-truth pixel counts make the overlap test cheap
    gt_cells = spec.cell_sums(gt.astype(np.int64))
    if gt_any.all() or not gt_any.any():
        raise ValueError("ground truth must contain both anomalous and normal frames")
    fpr = np.empty(len(thresholds))
    fnr = np.empty(len(thresholds))
    for k, t in enumerate(thresholds):
        # the +inf sentinel flags every cell, analysed or not
        det = cell_scores < t if np.isfinite(t) else np.full(cell_scores.shape, t > 0)
        n_det = det.reshape(len(det), -1).sum(axis=1) * n * n
        overlap = (gt_cells * det).reshape(len(det), -1).sum(axis=1)
        hit = (n_det > 0) & (overlap >= HIT_FRACTION * n_det)
        fnr[k] = np.mean(~hit[gt_any])
        fpr[k] = np.mean(n_det[~gt_any] > 0)
    eer, ef, en = equal_error_rate(fpr, fnr)
    return RocCurve(thresholds, fpr, fnr, eer, ef, en)


# ---------------------------------------------------------------------------
# Ground-truth files


def read_frame_flags(path) -> np.ndarray:
    flags = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 0 or 1, got {line!r}")
            flags.append(line == "1")
    return np.array(flags, dtype=bool)


def write_frame_flags(path, flags) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(bool(f))}\n" for f in flags)


def write_roc_csv(path, roc: RocCurve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,fpr,fnr\n")
        for t, fp, fn in roc.rows():
            fh.write(f"{t!r},{fp!r},{fn!r}\n")


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class BlobSpec:
    x: float
    y: float
    size: int = 16
    height: Optional[int] = None
    speed: float = 1.0
    direction: float = 0.0
    intensity: float = 200.0
    texture: str = "flat"
    orientation: float = 0.0
    period: float = 4.0
    contrast: float = 50.0
    anomalous: bool = False
    start: int = 0
    end: Optional[int] = None
    bounce: bool = False


@dataclass
class ScenarioSpec:
    width: int = 240
    height: int = 160
    frames: int = 100
    seed: int = 0
    time_offset: int = 0
    background_level: float = 100.0
    background_contrast: float = 30.0
    noise: float = 0.0
    blobs: List[BlobSpec] = field(default_factory=list)


_BLOB_TYPES = {
    "x": float, "y": float, "size": int, "height": int, "speed": float,
    "direction": float, "intensity": float, "texture": str,
    "orientation": float, "period": float, "contrast": float,
    "anomalous": None, "start": int, "end": int, "bounce": None,
}
_SCENE_TYPES = {
    "width": int, "height": int, "frames": int, "seed": int, "time_offset": int,
    "background.level": float, "background.contrast": float, "noise": float,
}
TEXTURES = ("flat", "stripes", "checker", "noise")


def _parse_bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_scenario(text: str) -> ScenarioSpec:
    """Parse ``key = value`` lines (``#`` comments).

    Scene keys: width, height, frames, seed, time_offset, background.level,
    background.contrast, noise.  Blob keys ``blob.<n>.<field>`` with fields
    x, y (top-left at time 0), size (side or width), height, speed (px per
    frame), direction (degrees, 0 = +x, 90 = +y), intensity, texture
    (flat|stripes|checker|noise), orientation, period, contrast, anomalous,
    start, end (visible frames, end exclusive), bounce.
    """
    scene = {}
    blobs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            if key.startswith("blob."):
                parts = key.split(".")
                if len(parts) != 3 or not parts[1].isdigit() or parts[2] not in _BLOB_TYPES:
                    raise ScenarioError(f"line {lineno}: unknown blob key {key!r}")
                conv = _BLOB_TYPES[parts[2]] or _parse_bool
                blobs.setdefault(int(parts[1]), {})[parts[2]] = conv(value)
            elif key in _SCENE_TYPES:
                scene[key] = _SCENE_TYPES[key](value)
            else:
                raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    for n, fields in blobs.items():
        if "x" not in fields or "y" not in fields:
            raise ScenarioError(f"blob {n}: x and y are required")
    spec = ScenarioSpec(
        width=scene.get("width", 240),
        height=scene.get("height", 160),
        frames=scene.get("frames", 100),
        seed=scene.get("seed", 0),
        time_offset=scene.get("time_offset", 0),
        background_level=scene.get("background.level", 100.0),
        background_contrast=scene.get("background.contrast", 30.0),
        noise=scene.get("noise", 0.0),
        blobs=[BlobSpec(**blobs[n]) for n in sorted(blobs)],
    )
    return spec


def load_scenario(path) -> ScenarioSpec:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


@dataclass
class SyntheticScene:
    frames: FrameSequence
    masks: np.ndarray
    frame_gt: np.ndarray
    pixel_gt: np.ndarray


def _reflect(p, lo, hi):
    """Fold ``p`` into [lo, hi] by bouncing off both ends."""
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def _blob_position(b: BlobSpec, t, w, h, bw, bh):
    th = math.radians(b.direction)
    x = b.x + b.speed * t * math.cos(th)
    y = b.y + b.speed * t * math.sin(th)
    if b.bounce:
        x = _reflect(x, 0.0, w - bw)
        y = _reflect(y, 0.0, h - bh)
    return int(math.floor(x + 0.5)), int(math.floor(y + 0.5))


def _blob_pattern(b: BlobSpec, bw, bh, rng):
    yy, xx = np.mgrid[0:bh, 0:bw].astype(np.float64)
    if b.texture == "flat":
        pat = np.zeros((bh, bw))
    elif b.texture == "stripes":
        th = math.radians(b.orientation)
        pat = np.sign(np.sin(2 * math.pi * (xx * math.cos(th) + yy * math.sin(th)) / b.period + 1e-9))
    elif b.texture == "checker":
        half = max(b.period / 2.0, 1.0)
        pat = np.where((np.floor(xx / half) + np.floor(yy / half)) % 2 == 0, 1.0, -1.0)
    elif b.texture == "noise":
        from scipy import ndimage

        raw = ndimage.gaussian_filter(rng.standard_normal((bh, bw)), max(b.period / 4.0, 0.5))
        pat = raw / (np.abs(raw).max() or 1.0)
    else:
        raise ScenarioError(f"unknown texture {b.texture!r}; expected one of {TEXTURES}")
    return b.intensity + b.contrast * pat


def synth_scene(spec: ScenarioSpec) -> SyntheticScene:
    """Render a deterministic scene of moving square blobs over a static,
    smoothly textured background."""
    from scipy import ndimage

    w, h, n = spec.width, spec.height, spec.frames
    if w < 1 or h < 1 or n < 1:
        raise ScenarioError("width, height and frames must be positive")
    rng = np.random.default_rng(spec.seed)
    bg = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5)
    bg = spec.background_level + spec.background_contrast * bg / (np.abs(bg).max() or 1.0)
    patterns = []
    for k, b in enumerate(spec.blobs):
        bw, bh = b.size, b.height or b.size
        if bw < 1 or bh < 1 or bw > w or bh > h:
            raise ScenarioError(f"blob {k}: size {bw}x{bh} does not fit a {w}x{h} frame")
        patterns.append(_blob_pattern(b, bw, bh, rng))

    frames = np.empty((n, h, w), dtype=np.uint8)
    masks = np.zeros((n, h, w), dtype=bool)
    pixel_gt = np.zeros((n, h, w), dtype=bool)
    for f in range(n):
        t = f + spec.time_offset
        img = bg.copy()
        for k, (b, pat) in enumerate(zip(spec.blobs, patterns)):
            if t < b.start or (b.end is not None and t >= b.end):
                continue
            bh, bw = pat.shape
            x, y = _blob_position(b, t - b.start, w, h, bw, bh)
            if x < 0 or y < 0 or x + bw > w or y + bh > h:
                raise ScenarioError(f"blob {k} leaves the {w}x{h} frame at frame {f} (x={x}, y={y})")
            img[y : y + bh, x : x + bw] = pat
            masks[f, y : y + bh, x : x + bw] = True
            if b.anomalous:
                pixel_gt[f, y : y + bh, x : x + bw] = True
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise, img.shape)
        frames[f] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    frame_gt = pixel_gt.reshape(n, -1).any(axis=1)
    return SyntheticScene(FrameSequence(frames), masks, frame_gt, pixel_gt)
