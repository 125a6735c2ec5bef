"""Two-stage cell classifier, spatio-temporal post-filter and the
scikit-learn style estimator wrapping the full pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .features import (
    CellFeatures,
    FeatureConfig,
    GaborBank,
    SequenceFeatures,
    extract_features,
)
from .foreground import BackgroundModel, segment, train_background
from .ingest import CellGridSpec
from .models import (
    MATCH_THRESHOLD,
    CellModel,
    TextureCodebook,
    _pearson_rows,
    codebook_best_match,
    codebook_observe,
    fit_pmf,
    load_model_file,
    pmf_lookup,
    pmf_lookup_array,
    save_models,
)
from .optflow import FlowConfig
from .validation import check_sequences

logger = logging.getLogger(__name__)

NORMAL, MOTION, SIZE_TEXTURE = 0, 1, 2
REASONS = {NORMAL: "normal", MOTION: "motion", SIZE_TEXTURE: "size+texture"}


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float = 0.01
    texture_gate: float = MATCH_THRESHOLD
    min_train_samples: int = 1
    # separate threshold for condition (b); None means ``threshold``
    size_threshold: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.size_threshold is not None and not 0.0 <= self.size_threshold <= 1.0:
            raise ValueError(f"size_threshold must lie in [0, 1], got {self.size_threshold}")
        if not -1.0 <= self.texture_gate <= 1.0:
            raise ValueError(f"texture_gate must lie in [-1, 1], got {self.texture_gate}")

    @property
    def size_t(self):
        return self.threshold if self.size_threshold is None else self.size_threshold


class CellDecision(NamedTuple):
    anomalous: bool
    reason: str
    p_motion: Optional[float] = None
    p_size: Optional[float] = None
    rho_max: Optional[float] = None


def motion_probability(model: CellModel, mot, min_samples=1):
    if model.motion_pmf is None or model.motion_samples < min_samples:
        return 0.0
    return pmf_lookup(model.motion_pmf, mot)


def size_probability(model: CellModel, size, min_samples=1):
    if model.size_pmf is None or model.size_samples < min_samples:
        return 0.0
    return pmf_lookup(model.size_pmf, size)


def texture_match(model: CellModel, txt, min_samples=1):
    if model.texture_samples < min_samples:
        return -1.0
    return codebook_best_match(model.codebook, txt)


def classify_cell(features: CellFeatures, model: CellModel, cfg: DetectorConfig) -> CellDecision:
    """Speed check first; only if it passes, the size check with texture veto.

    A cell without a motion estimate (no flow available around t) skips
    the speed check.
    """
    p_mot = None
    if features.mot is not None:
        p_mot = motion_probability(model, features.mot, cfg.min_train_samples)
        if p_mot < cfg.threshold:
            return CellDecision(True, REASONS[MOTION], p_mot)
    p_size = size_probability(model, features.size, cfg.min_train_samples)
    if p_size < cfg.size_t:
        rho = -1.0 if features.txt is None else texture_match(model, features.txt, cfg.min_train_samples)
        if rho < cfg.texture_gate:
            return CellDecision(True, REASONS[SIZE_TEXTURE], p_mot, p_size, rho)
        return CellDecision(False, REASONS[NORMAL], p_mot, p_size, rho)
    return CellDecision(False, REASONS[NORMAL], p_mot, p_size)


# ---------------------------------------------------------------------------
# Post-processing


def _plane_counts(grid):
    """Number of flagged cells in the 3x3 neighbourhood of every cell."""
    g = np.pad(np.asarray(grid, dtype=np.int32), 1)
    h, w = grid.shape
    out = np.zeros((h, w), dtype=np.int32)
    for a in range(3):
        for b in range(3):
            out += g[a : a + h, b : b + w]
    return out


def postprocess(prev, cur, nxt) -> np.ndarray:
    """Keep a flagged cell at t only if the 3x3 plane around it at each of
    t-1, t and t+1 holds at least two flagged cells (the plane at t counts
    the cell itself).  ``prev``/``nxt`` may be None at sequence boundaries.
    """
    cur = np.asarray(cur, dtype=bool)
    keep = cur.copy()
    for plane in (prev, cur, nxt):
        if plane is None:
            continue
        keep &= _plane_counts(np.asarray(plane, dtype=bool)) >= 2
    return keep


def postprocess_volume(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=bool)
    n = len(raw)
    return np.stack(
        [
            postprocess(raw[t - 1] if t > 0 else None, raw[t], raw[t + 1] if t + 1 < n else None)
            for t in range(n)
        ]
    )


def _second_smallest_3x3(scores):
    """Second-smallest value in each cell's 3x3 neighbourhood (inf padding)."""
    p = np.pad(scores, 1, constant_values=np.inf)
    h, w = scores.shape
    stack = np.stack([p[a : a + h, b : b + w] for a in range(3) for b in range(3)])
    return np.partition(stack, 1, axis=0)[1]


def filtered_scores(scores) -> np.ndarray:
    """Per-cell score after post-filtering.

    Thresholding the result at T gives exactly
    ``postprocess_volume(scores < T)``: a cell survives iff its own score
    and the second-smallest score of every existing 3x3 plane are below T.
    """
    scores = np.asarray(scores, dtype=np.float64)
    second = np.stack([_second_smallest_3x3(s) for s in scores])
    out = np.maximum(scores, second)
    out[1:] = np.maximum(out[1:], second[:-1])
    out[:-1] = np.maximum(out[:-1], second[1:])
    return out


# ---------------------------------------------------------------------------
# Detection over feature volumes


@dataclass
class AnomalyVolume:
    """Per-frame, per-cell detection output.

    ``scores`` are raw cell scores (``inf`` where the cell was not
    analysed); ``filtered`` the post-filter equivalent.  Flags follow from
    ``scores < threshold`` and ``filtered < threshold``.
    """

    raw: np.ndarray
    final: np.ndarray
    reasons: np.ndarray
    scores: np.ndarray
    filtered: np.ndarray
    p_motion: np.ndarray
    p_size: np.ndarray
    rho_max: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.raw)

    @property
    def frame_scores(self):
        """Lowest post-filtered cell score per frame (inf if nothing analysed)."""
        return self.filtered.reshape(len(self.filtered), -1).min(axis=1)

    @property
    def frame_flags(self):
        return self.final.reshape(len(self.final), -1).any(axis=1)

    def anomalies(self):
        """Yield ``(frame, i, j, reason, score)`` for every final flag."""
        for t, j, i in zip(*np.nonzero(self.final)):
            yield int(t), int(i), int(j), REASONS[int(self.reasons[t, j, i])], float(self.scores[t, j, i])


class _CompiledCell:
    __slots__ = ("motion", "size", "entries", "entry_ok")

    def __init__(self, model: CellModel, min_samples):
        self.motion = model.motion_pmf if model.motion_samples >= min_samples else None
        self.size = model.size_pmf if model.size_samples >= min_samples else None
        ok = model.texture_samples >= min_samples and len(model.codebook) > 0
        self.entries = model.codebook.as_array() if ok else None


def detect_features(feats: SequenceFeatures, models, cfg: DetectorConfig) -> AnomalyVolume:
    """Classify every analysed cell and post-filter the flags."""
    n, gh, gw = feats.occupancy.shape
    if len(models) != gh or any(len(row) != gw for row in models):
        raise ValueError(f"model grid does not match the {gw}x{gh} cell grid")
    compiled = [[_CompiledCell(models[j][i], cfg.min_train_samples) for i in range(gw)] for j in range(gh)]

    p_mot = np.full((n, gh, gw), np.nan)
    p_size = np.full((n, gh, gw), np.nan)
    rho = np.full((n, gh, gw), np.nan)
    analysed = feats.occupancy > 0
    for j in range(gh):
        for i in range(gw):
            c = compiled[j][i]
            ts = np.nonzero(analysed[:, j, i])[0]
            if len(ts) == 0:
                continue
            mot = feats.mot[ts, j, i]
            pm = np.zeros(len(ts)) if c.motion is None else pmf_lookup_array(c.motion, mot)
            p_mot[ts, j, i] = np.where(np.isnan(mot), np.nan, pm)
            p_size[ts, j, i] = 0.0 if c.size is None else pmf_lookup_array(c.size, feats.size[ts, j, i])
            if c.entries is None:
                rho[ts, j, i] = -1.0
            else:
                txt = feats.txt[ts, :, j, i]
                rho[ts, j, i] = [_pearson_rows(c.entries, x).max() for x in txt]

    # Condition (a) fires when p_mot < T; condition (b) when p_size < T and
    # rho < gate.  Encoding (b) as a score lets one threshold test reproduce
    # the cascade at every T.
    pm_score = np.where(np.isnan(p_mot), np.inf, p_mot)
    gated = np.where(rho < cfg.texture_gate, p_size, np.inf)
    if cfg.size_threshold is not None and cfg.size_t > 0:
        gated = gated * (cfg.threshold / cfg.size_t)
    scores = np.where(analysed, np.minimum(pm_score, gated), np.inf)
    raw = scores < cfg.threshold
    reasons = np.where(pm_score < cfg.threshold, MOTION, np.where(raw, SIZE_TEXTURE, NORMAL)).astype(np.int8)
    filt = filtered_scores(scores)
    final = filt < cfg.threshold
    return AnomalyVolume(raw, final, reasons, scores, filt, p_mot, p_size, rho, cfg.threshold)


# ---------------------------------------------------------------------------
# Training


def collect_samples(feats: SequenceFeatures, store):
    """Append a sequence's per-cell training samples to ``store``
    (``store[j][i] = (motion list, size list, texture list)``)."""
    n, gh, gw = feats.occupancy.shape
    for t in range(n):
        js, is_ = np.nonzero(feats.occupancy[t] > 0)
        for j, i in zip(js, is_):
            mot_s, size_s, txt_s = store[j][i]
            m = feats.mot[t, j, i]
            if not np.isnan(m):
                mot_s.append(m)
            size_s.append(feats.size[t, j, i])
            txt_s.append(feats.txt[t, :, j, i])


def fit_cell_model(mot_s, size_s, txt_s, delta_x, mot_upper_s, size_upper_s, bandwidth, gate):
    cb = TextureCodebook(match_threshold=gate)
    for x in txt_s:
        codebook_observe(cb, x)
    return CellModel(
        fit_pmf(mot_s, delta_x, mot_upper_s, bandwidth),
        fit_pmf(size_s, delta_x, size_upper_s, bandwidth),
        cb,
        len(mot_s),
        len(size_s),
        len(txt_s),
    )


class CellAnomalyDetector(OutlierMixin, BaseEstimator):
    """Cell-based anomaly detector for crowded scenes.

    ``fit`` takes a list of training sequences (each a (T, H, W) uint8
    stack or FrameSequence).  Following the scikit-learn outlier
    convention, ``score_samples`` gives one score per frame where lower is
    more anomalous, and ``predict`` returns -1 for anomalous frames and +1
    for normal ones.  ``detect`` returns the full per-cell output.

    Foreground masks come from a temporal-median background learned in
    ``fit`` unless ``masks`` are passed explicitly to both ``fit`` and
    ``detect``.
    """

    def __init__(
        self,
        cell_size=16,
        fg_threshold=30,
        flow_window=15,
        flow_levels=3,
        flow_iters=10,
        flow_eps=0.01,
        gabor_ksize=9,
        gabor_lambda=4.0,
        gabor_sigma=2.0,
        gabor_gamma=0.5,
        texture_fg_only=False,
        delta_x=0.25,
        motion_max=10.0,
        size_max=None,
        bandwidth="auto",
        threshold=0.01,
        texture_gate=MATCH_THRESHOLD,
        min_train_samples=1,
        size_threshold=None,
    ):
        self.cell_size = cell_size
        self.fg_threshold = fg_threshold
        self.flow_window = flow_window
        self.flow_levels = flow_levels
        self.flow_iters = flow_iters
        self.flow_eps = flow_eps
        self.gabor_ksize = gabor_ksize
        self.gabor_lambda = gabor_lambda
        self.gabor_sigma = gabor_sigma
        self.gabor_gamma = gabor_gamma
        self.texture_fg_only = texture_fg_only
        self.delta_x = delta_x
        self.motion_max = motion_max
        self.size_max = size_max
        self.bandwidth = bandwidth
        self.threshold = threshold
        self.texture_gate = texture_gate
        self.min_train_samples = min_train_samples
        self.size_threshold = size_threshold

    # -- configuration views -------------------------------------------------

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            cell_size=int(self.cell_size),
            flow=FlowConfig(int(self.flow_window), int(self.flow_levels), int(self.flow_iters), float(self.flow_eps)),
            gabor=GaborBank(int(self.gabor_ksize), float(self.gabor_lambda), float(self.gabor_sigma), float(self.gabor_gamma)),
            texture_fg_only=bool(self.texture_fg_only),
        )

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            float(self.threshold),
            float(self.texture_gate),
            int(self.min_train_samples),
            None if self.size_threshold is None else float(self.size_threshold),
        )

    def _grid_steps(self):
        dx = float(self.delta_x)
        if not dx > 0:
            raise ValueError("delta_x must be positive")
        size_max = self.cell_size**2 if self.size_max is None else float(self.size_max)
        return int(round(float(self.motion_max) / dx)), int(round(size_max / dx))

    # -- fitting -------------------------------------------------------------

    def _masks_for(self, stack, masks):
        if masks is not None:
            masks = np.asarray(masks, dtype=bool)
            if masks.shape != stack.shape:
                raise ValueError(f"masks {masks.shape} do not match frames {stack.shape}")
            return masks
        return np.stack([segment(f, self.background_model_) for f in stack])

    def fit(self, X, y=None, masks=None):
        seqs = check_sequences(X)
        shape = seqs[0].shape[1:]
        for s in seqs:
            if s.shape[1:] != shape:
                raise ValueError("all training sequences must share one frame size")
        if masks is not None:
            masks = list(masks)
            if len(masks) != len(seqs):
                raise ValueError("need one mask stack per training sequence")
            self.background_model_ = None
        else:
            self.background_model_ = train_background(np.concatenate(seqs), int(self.fg_threshold))
        self.grid_spec_ = CellGridSpec.for_frame(shape[1], shape[0], int(self.cell_size))
        gh, gw = self.grid_spec_.shape
        fcfg = self.feature_config()
        store = [[([], [], []) for _ in range(gw)] for _ in range(gh)]
        for k, s in enumerate(seqs):
            m = self._masks_for(s, None if masks is None else masks[k])
            collect_samples(extract_features(s, m, fcfg), store)
            logger.info("training sequence %d/%d: %d frames", k + 1, len(seqs), len(s))
        mot_s, size_s = self._grid_steps()
        self.models_ = [
            [
                fit_cell_model(*store[j][i], float(self.delta_x), mot_s, size_s, self.bandwidth, float(self.texture_gate))
                for i in range(gw)
            ]
            for j in range(gh)
        ]
        self.frame_shape_ = shape
        return self

    # -- inference -----------------------------------------------------------

    def extract(self, X, masks=None) -> SequenceFeatures:
        check_is_fitted(self, "models_")
        (stack,) = check_sequences(X)
        if stack.shape[1:] != tuple(self.frame_shape_):
            raise ValueError(f"frames are {stack.shape[1:]}, the model expects {tuple(self.frame_shape_)}")
        if masks is None and self.background_model_ is None:
            raise ValueError("model was trained on external masks; pass masks to detect")
        return extract_features(stack, self._masks_for(stack, masks), self.feature_config())

    def detect(self, X, masks=None) -> AnomalyVolume:
        """Run the full pipeline over one sequence."""
        return detect_features(self.extract(X, masks), self.models_, self.detector_config())

    def score_samples(self, X, masks=None):
        return self.detect(X, masks).frame_scores

    def decision_function(self, X, masks=None):
        return self.score_samples(X, masks) - float(self.threshold)

    def predict(self, X, masks=None):
        return np.where(self.detect(X, masks).frame_flags, -1, 1)

    def fit_predict(self, X, y=None, **kwargs):
        raise NotImplementedError("train on normal sequences, then predict on test sequences")

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "models_")
        params = {k: repr(v) for k, v in self.get_params().items()}
        params["frame_shape"] = f"{self.frame_shape_[0]}x{self.frame_shape_[1]}"
        bg = None
        if self.background_model_ is not None:
            bg = (self.background_model_.background, self.background_model_.threshold)
        save_models(self.models_, path, params, bg)

    @classmethod
    def load(cls, path):
        import ast

        models, params, background = load_model_file(path)
        shape = params.pop("frame_shape", None)
        kwargs = {}
        valid = cls().get_params()
        for k, v in params.items():
            if k not in valid:
                raise ValueError(f"{path}: unknown parameter {k!r} in model file")
            kwargs[k] = ast.literal_eval(v)
        det = cls(**kwargs)
        if shape is None:
            raise ValueError(f"{path}: model file lacks the frame_shape parameter")
        h, w = (int(v) for v in shape.split("x"))
        det.frame_shape_ = (h, w)
        det.grid_spec_ = CellGridSpec.for_frame(w, h, int(det.cell_size))
        if len(models) != det.grid_spec_.grid_h or any(len(r) != det.grid_spec_.grid_w for r in models):
            raise ValueError(f"{path}: cell grid does not match frame size {w}x{h}")
        det.background_model_ = None if background is None else BackgroundModel(background[0], background[1])
        det.models_ = models
        return det
