"""Command-line entry point: ``crowdcell train|detect|eval|synth``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration/usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .detector import CellAnomalyDetector
from .evaluate import (
    frame_roc,
    load_scenario,
    localization_roc,
    read_frame_flags,
    synth_scene,
    write_frame_flags,
    write_roc_csv,
)
from .exceptions import ConfigError, CrowdCellError, ScenarioError
from .foreground import load_external_masks
from .ingest import CellGridSpec, find_sequences, list_frames, load_images, load_sequence, write_frame_outputs, write_pgm

logger = logging.getLogger("crowdcell")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _external_masks(cfg, seq_dir, n_frames):
    root = cfg.path("fg.external_mask_dir")
    if root is None:
        return None
    mask_dir = root / seq_dir.name if (root / seq_dir.name).is_dir() else root
    masks = np.stack(load_external_masks(mask_dir, cfg.get("frames.pattern")))
    if len(masks) != n_frames:
        raise CrowdCellError(f"{mask_dir}: {len(masks)} masks for {n_frames} frames")
    return masks


def cmd_train(cfg) -> int:
    cfg.require("train_dir", "model_path")
    pattern = cfg.get("frames.pattern")
    seq_dirs = find_sequences(cfg.path("train_dir"), pattern)
    seqs = [load_sequence(d, pattern) for d in seq_dirs]
    masks = None
    if cfg.get("fg.external_mask_dir") is not None:
        masks = [_external_masks(cfg, d, len(s)) for d, s in zip(seq_dirs, seqs)]
    det = CellAnomalyDetector(**cfg.estimator_params())
    start = time.perf_counter()
    det.fit([s.frames for s in seqs], masks=masks)
    elapsed = time.perf_counter() - start
    det.save(cfg.path("model_path"))

    counts = np.array([[m.motion_samples for m in row] for row in det.models_])
    print(f"trained on {len(seqs)} sequence(s), {sum(len(s) for s in seqs)} frames in {elapsed:.1f} s")
    print(f"grid {counts.shape[1]}x{counts.shape[0]} cells; motion samples per cell:")
    for row in counts:
        print("  " + " ".join(f"{c:6d}" for c in row))
    print(f"untrained cells: {int((counts == 0).sum())}")
    print(f"model written to {cfg.get('model_path')}")
    return EXIT_OK


def _write_detection(out_dir, seq, vol, spec):
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        write_frame_outputs(out_dir, seq.names[t], vol.final[t], spec, seq.frames[t])
    with open(out_dir / "anomalies.csv", "w", encoding="utf-8") as fh:
        fh.write("frame,i,j,reason,score\n")
        for t, i, j, reason, score in vol.anomalies():
            fh.write(f"{t},{i},{j},{reason},{score!r}\n")
    with open(out_dir / "frame_scores.csv", "w", encoding="utf-8") as fh:
        fh.write("frame,name,score,anomalous\n")
        for t, (name, score, flag) in enumerate(zip(seq.names, vol.frame_scores, vol.frame_flags)):
            fh.write(f"{t},{name},{float(score)!r},{int(flag)}\n")
    np.save(out_dir / "cell_scores.npy", vol.filtered)


def cmd_detect(cfg) -> int:
    cfg.require("test_dir", "model_path", "out_dir")
    det = CellAnomalyDetector.load(cfg.path("model_path"))
    # detection-time settings from the config override the stored ones
    for key, param in (
        ("detect.threshold", "threshold"),
        ("detect.texture_gate", "texture_gate"),
        ("detect.min_train_samples", "min_train_samples"),
        ("detect.size_threshold", "size_threshold"),
    ):
        if key in cfg.values:
            det.set_params(**{param: cfg.get(key)})
    pattern = cfg.get("frames.pattern")
    test_root = cfg.path("test_dir")
    out_root = cfg.path("out_dir")
    seq_dirs = find_sequences(test_root, pattern)
    single = seq_dirs == [test_root]
    total_frames = 0
    busy = 0.0
    wall = time.perf_counter()
    for d in seq_dirs:
        seq = load_sequence(d, pattern)
        start = time.perf_counter()
        vol = det.detect(seq.frames, masks=_external_masks(cfg, d, len(seq)))
        out_dir = out_root if single else out_root / d.name
        _write_detection(out_dir, seq, vol, det.grid_spec_)
        busy += time.perf_counter() - start
        total_frames += len(seq)
        print(f"{d.name}: {len(seq)} frames, {int(vol.frame_flags.sum())} anomalous")
    wall = time.perf_counter() - wall
    print(
        f"processed {total_frames} frames in {wall:.2f} s "
        f"({total_frames / wall:.1f} fps overall, {total_frames / busy:.1f} fps detect+write)"
    )
    return EXIT_OK


def _read_scores(path):
    rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    return np.atleast_1d(rows["score"]).astype(np.float64)


def cmd_eval(cfg) -> int:
    cfg.require("out_dir", "gt_frames")
    out_root = cfg.path("out_dir")
    gt_frames = cfg.path("gt_frames")
    gt_pixels = cfg.path("gt_pixels")
    if not gt_frames.exists():
        raise UsageError(f"ground-truth file {gt_frames} does not exist")
    if gt_pixels is not None and not gt_pixels.exists():
        raise UsageError(f"pixel ground truth {gt_pixels} does not exist")
    if (out_root / "frame_scores.csv").exists():
        runs = [(out_root, gt_frames, gt_pixels)]
    else:
        runs = []
        for sub in sorted(p for p in out_root.iterdir() if (p / "frame_scores.csv").exists()):
            flags = gt_frames / f"{sub.name}.txt"
            if not flags.exists():
                raise UsageError(f"missing frame ground truth {flags}")
            pix = None
            if gt_pixels is not None and (gt_pixels / sub.name).is_dir():
                pix = gt_pixels / sub.name
            runs.append((sub, flags, pix))
    if not runs:
        raise CrowdCellError(f"{out_root}: no detection outputs (frame_scores.csv) found")

    scores, labels = [], []
    loc_scores, loc_gt = [], []
    for det_dir, flags_path, pix_dir in runs:
        s = _read_scores(det_dir / "frame_scores.csv")
        g = read_frame_flags(flags_path)
        if len(s) != len(g):
            raise CrowdCellError(f"{flags_path}: {len(g)} flags for {len(s)} detected frames")
        scores.append(s)
        labels.append(g)
        if pix_dir is not None:
            masks = load_images(list_frames(pix_dir, cfg.get("frames.pattern"))) != 0
            cells = np.load(det_dir / "cell_scores.npy")
            if len(masks) != len(cells):
                raise CrowdCellError(f"{pix_dir}: {len(masks)} masks for {len(cells)} frames")
            loc_scores.append(cells)
            loc_gt.append(masks)

    roc = frame_roc(np.concatenate(scores), np.concatenate(labels))
    write_roc_csv(out_root / "roc.csv", roc)
    (out_root / "eer.txt").write_text(f"{roc.eer!r}\n", encoding="utf-8")
    print(f"frame-level EER: {roc.eer:.4f}")
    if loc_scores:
        cells = np.concatenate(loc_scores)
        gt = np.concatenate(loc_gt)
        n = cfg.get("cell.size")
        spec = CellGridSpec(n, cells.shape[2], cells.shape[1])
        lroc = localization_roc(cells, gt, spec)
        write_roc_csv(out_root / "pixel_roc.csv", lroc)
        (out_root / "pixel_eer.txt").write_text(f"{lroc.eer!r}\n", encoding="utf-8")
        print(f"pixel-level EER: {lroc.eer:.4f}")
    return EXIT_OK


def cmd_synth(spec_path, out_dir, seed=None) -> int:
    spec = load_scenario(spec_path)
    if seed is not None:
        spec.seed = seed
    scene = synth_scene(spec)
    out_dir = Path(out_dir)
    for sub in ("frames", "masks", "gt_pixels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for t in range(len(scene.frames)):
        stem = scene.frames.names[t]
        write_pgm(out_dir / "frames" / f"{stem}.pgm", scene.frames.frames[t])
        write_pgm(out_dir / "masks" / f"{stem}.pgm", scene.masks[t])
        write_pgm(out_dir / "gt_pixels" / f"{stem}.pgm", scene.pixel_gt[t])
    write_frame_flags(out_dir / "gt_frames.txt", scene.frame_gt)
    print(f"wrote {len(scene.frames)} frames to {out_dir}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="crowdcell", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="key = value configuration file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a configuration key (repeatable)",
        )

    p = sub.add_parser("train", help="learn background and per-cell models")
    common(p)
    p.add_argument("--train-dir")
    p.add_argument("--model-path")

    p = sub.add_parser("detect", help="detect anomalies in test sequences")
    common(p)
    p.add_argument("--test-dir")
    p.add_argument("--model-path")
    p.add_argument("--out-dir")

    p = sub.add_parser("eval", help="frame-level and pixel-level ROC / EER")
    common(p)
    p.add_argument("--out-dir")
    p.add_argument("--gt-frames")
    p.add_argument("--gt-pixels")

    p = sub.add_parser("synth", help="render a synthetic scenario")
    p.add_argument("spec", help="scenario description file")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    return parser


def _config_from_args(args):
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides.append((key.strip(), value.strip()))
    for attr, key in (
        ("train_dir", "train_dir"),
        ("test_dir", "test_dir"),
        ("model_path", "model_path"),
        ("out_dir", "out_dir"),
        ("gt_frames", "gt_frames"),
        ("gt_pixels", "gt_pixels"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append((key, value))
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            return cmd_synth(args.spec, args.out_dir, args.seed)
        cfg = _config_from_args(args)
        return {"train": cmd_train, "detect": cmd_detect, "eval": cmd_eval}[args.command](cfg)
    except (ConfigError, ScenarioError, UsageError) as exc:
        print(f"crowdcell: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CrowdCellError, OSError, ValueError) as exc:
        print(f"crowdcell: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
