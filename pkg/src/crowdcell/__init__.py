"""Cell-based anomaly detection for crowded video scenes."""

from .detector import AnomalyVolume, CellAnomalyDetector, DetectorConfig, classify_cell, filtered_scores, postprocess
from .evaluate import RocCurve, equal_error_rate, frame_roc, localization_roc, synth_scene
from .exceptions import CrowdCellError, ModelFormatError
from .features import FeatureConfig, GaborBank, SequenceFeatures, extract_features
from .foreground import MedianBackgroundSubtractor, segment, train_background
from .ingest import CellGridSpec, FrameSequence, load_sequence, read_pnm, write_pgm
from .models import CellModel, Pmf, TextureCodebook, fit_pmf, load_models, pmf_lookup, save_models
from .optflow import FlowConfig, lucas_kanade

__version__ = "0.1.0"

__all__ = [
    "AnomalyVolume", "CellAnomalyDetector", "CellGridSpec", "CellModel", "CrowdCellError",
    "DetectorConfig", "FeatureConfig", "FlowConfig", "FrameSequence", "GaborBank",
    "MedianBackgroundSubtractor", "ModelFormatError", "Pmf", "RocCurve", "SequenceFeatures",
    "TextureCodebook", "classify_cell", "equal_error_rate", "extract_features", "filtered_scores",
    "fit_pmf", "frame_roc", "load_models", "load_sequence", "localization_roc", "lucas_kanade",
    "pmf_lookup", "postprocess", "read_pnm", "save_models", "segment", "synth_scene",
    "train_background", "write_pgm",
]
