import itertools

import numpy as np
import pytest
from sklearn.base import clone

from conftest import speed_scene
from crowdcell.detector import (
    CellAnomalyDetector,
    DetectorConfig,
    classify_cell,
    filtered_scores,
    postprocess,
    postprocess_volume,
)
from crowdcell.evaluate import synth_scene
from crowdcell.features import CellFeatures
from crowdcell.models import CellModel, Pmf, TextureCodebook


def point_pmf(p_at_one, p_elsewhere):
    """Pmf over 0..4 (delta 0.25 up to 1.0) with probs[4] = p_at_one."""
    probs = np.full(5, p_elsewhere)
    probs[4] = p_at_one
    return Pmf(0.25, 4, probs, 10)


def model_for(low_mot, low_size, low_rho):
    mot = point_pmf(0.001 if low_mot else 0.5, 0.1)
    size = point_pmf(0.001 if low_size else 0.5, 0.1)
    entry = np.array([4.0, 3.0, 2.0, 1.0]) if low_rho else np.array([1.0, 2.0, 3.0, 4.0])
    return CellModel(mot, size, TextureCodebook([entry], [1]), 10, 10, 10)


FEATS = CellFeatures(mot=1.0, size=1.0, txt=np.array([1.0, 2.0, 3.0, 4.0]), occupancy=10)


@pytest.mark.parametrize("low_mot,low_size,low_rho", list(itertools.product([False, True], repeat=3)))
def test_cascade_truth_table(low_mot, low_size, low_rho):
    d = classify_cell(FEATS, model_for(low_mot, low_size, low_rho), DetectorConfig(threshold=0.01))
    expected = low_mot or (low_size and low_rho)
    assert d.anomalous == expected
    if low_mot:
        assert d.reason == "motion" and d.p_size is None and d.rho_max is None
    elif expected:
        assert d.reason == "size+texture"


def test_missing_motion_skips_speed_check():
    feats = CellFeatures(mot=None, size=1.0, txt=FEATS.txt, occupancy=10)
    assert not classify_cell(feats, model_for(True, False, False), DetectorConfig()).anomalous
    assert classify_cell(feats, model_for(True, True, True), DetectorConfig()).reason == "size+texture"


def test_untrained_cell_is_anomalous():
    d = classify_cell(FEATS, CellModel(), DetectorConfig())
    assert d.anomalous and d.reason == "motion"


def postprocess_oracle(vol):
    t_n, h, w = vol.shape
    out = np.zeros_like(vol)
    for t, j, i in itertools.product(range(t_n), range(h), range(w)):
        if not vol[t, j, i]:
            continue
        ok = True
        for tt in (t - 1, t, t + 1):
            if not 0 <= tt < t_n:
                continue
            n = sum(
                vol[tt, jj, ii]
                for jj in range(j - 1, j + 2)
                for ii in range(i - 1, i + 2)
                if 0 <= jj < h and 0 <= ii < w
            )
            ok &= n >= 2
        out[t, j, i] = ok
    return out


def test_postprocess_matches_oracle(rng):
    for density in (0.2, 0.5, 0.8):
        vol = rng.random((5, 5, 5)) < density
        np.testing.assert_array_equal(postprocess_volume(vol), postprocess_oracle(vol))


def test_postprocess_single_frame_boundaries():
    cur = np.zeros((3, 3), dtype=bool)
    cur[1, 1] = cur[1, 2] = True
    assert postprocess(None, cur, None).sum() == 2
    assert postprocess(np.zeros((3, 3), bool), cur, None).sum() == 0


def test_filtered_scores_equal_postprocess_at_every_threshold(rng):
    scores = rng.random((6, 4, 5))
    scores[rng.random(scores.shape) < 0.2] = np.inf
    filt = filtered_scores(scores)
    for t in np.concatenate([np.unique(scores[np.isfinite(scores)]), [0.0, 2.0]]):
        np.testing.assert_array_equal(filt < t, postprocess_volume(scores < t))


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(threshold=2.0)
    with pytest.raises(ValueError):
        DetectorConfig(texture_gate=1.5)


@pytest.fixture(scope="module")
def small_fit():
    train = synth_scene(speed_scene(40, 0))
    test = synth_scene(speed_scene(12, 40))
    return CellAnomalyDetector().fit([train.frames.frames]), test


def test_estimator_params_and_clone():
    det = CellAnomalyDetector(threshold=0.05, cell_size=8)
    c = clone(det)
    assert c.get_params()["threshold"] == 0.05 and c.get_params()["cell_size"] == 8
    with pytest.raises(Exception):
        det.predict(np.zeros((3, 32, 32), dtype=np.uint8))


def test_estimator_outputs(small_fit):
    det, test = small_fit
    frames = test.frames.frames
    vol = det.detect(frames)
    assert vol.final.shape == (12,) + det.grid_spec_.shape
    np.testing.assert_array_equal(det.score_samples(frames), vol.frame_scores)
    pred = det.predict(frames)
    assert set(np.unique(pred)) <= {-1, 1}
    np.testing.assert_array_equal(pred == -1, vol.frame_flags)
    np.testing.assert_array_equal(vol.final, vol.filtered < det.threshold)
    np.testing.assert_array_equal(vol.final, postprocess_volume(vol.raw))
    with pytest.raises(ValueError):
        det.detect(frames[:, :64])


def test_save_load_is_exact(small_fit, tmp_path):
    det, test = small_fit
    det.save(tmp_path / "m.txt")
    back = CellAnomalyDetector.load(tmp_path / "m.txt")
    assert back.get_params() == det.get_params()
    a = det.detect(test.frames.frames)
    b = back.detect(test.frames.frames)
    np.testing.assert_array_equal(a.filtered, b.filtered)


def test_external_masks_required_when_trained_with_them(small_fit):
    det, test = small_fit
    frames = test.frames.frames
    det2 = CellAnomalyDetector().fit([frames], masks=[test.masks])
    assert det2.background_model_ is None
    with pytest.raises(ValueError):
        det2.detect(frames)
    assert len(det2.detect(frames, masks=test.masks)) == len(frames)
