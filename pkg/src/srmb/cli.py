"""Command-line entry point: check, synth, train, eval, sample.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error. Every
command is deterministic given identical flags, seed, and inputs; outputs
carry no timestamps. The SRMB_THREADS environment variable caps the worker
pool used for per-video evaluation (default: available parallelism).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from numpy.random import PCG64, Generator

from . import data as dt
from .check import SUITES, run_suites
from .errors import SrmbError, UsageError
from .metrics import (aggregate, default_palette, ribbon_export, video_metrics,
                      write_report)
from .model import Model, ModelConfig, predict_phases
from .train import TrainConfig, run_training


def _thread_cap() -> int:
    raw = os.environ.get("SRMB_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SRMB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SRMB_THREADS must be >= 1, got {n}")
    return n


def _load_dataset(manifest_path):
    """Dataset behind a manifest: (n_phases, [(FeatureSequence, PhaseSequence)])."""
    manifest_path = Path(manifest_path)
    doc = dt.load_manifest(manifest_path)
    base = manifest_path.parent
    videos = []
    for entry in doc["videos"]:
        feats = dt.load_features(base / entry["features"])
        phases = dt.load_annotations(base / entry["annotations"])
        videos.append((dt.FeatureSequence(entry["id"], feats.features),
                       dt.PhaseSequence(entry["id"], phases.labels)))
    return int(doc["n_phases"]), videos


# ------------------------------------------------------------------- commands


def cmd_check(args) -> int:
    results = run_suites(args.suite, seed=args.seed, trials=args.trials)
    for res in results:
        for line in res.lines():
            print(line)
    if all(res.passed for res in results):
        print("all suites passed")
        return 0
    print("FAILURES present")
    return 1


def cmd_synth(args) -> int:
    if args.phases < 2:
        raise UsageError("--phases must be >= 2")
    if args.future_marker and args.phases < 3:
        raise UsageError("--future-marker needs --phases >= 3")
    cfg = dt.SynthConfig(n_videos=args.videos, n_phases=args.phases,
                         t_range=(args.t_min, args.t_max),
                         feature_dim=args.feature_dim,
                         noise_sigma=args.noise_sigma,
                         future_marker=args.future_marker,
                         marker_lag=args.marker_lag)
    videos = dt.synth_generate(cfg, seed=args.seed)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    entries = []
    for feats, phases in videos:
        feat_rel = f"features/{feats.video_id}.srft"
        ann_rel = f"annotations/{feats.video_id}.csv"
        dt.write_features(out / feat_rel, feats)
        dt.write_annotations(out / ann_rel, phases)
        entries.append({"id": feats.video_id, "features": feat_rel,
                        "annotations": ann_rel})
    dt.write_manifest(out / "manifest.json", cfg.n_phases, entries,
                      generator=cfg, seed=args.seed)
    print(f"wrote {len(entries)} videos under {out}")
    return 0


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _reject_unknown(section: str, doc: dict, allowed: set) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise UsageError(f"unknown {section} config keys: {', '.join(unknown)}")


def load_run_config(path):
    """Parse and validate a training RunConfig JSON.

    Returns (model_kwargs, TrainConfig, manifest_path). The model section may
    omit d_in and n_phases; they are then inferred from the dataset.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: run config must be a JSON object")
    _reject_unknown("top-level", doc, {"model", "train", "data"})
    model_doc = doc.get("model", {})
    train_doc = doc.get("train", {})
    data_doc = doc.get("data", {})
    _reject_unknown("model", model_doc, _MODEL_KEYS)
    _reject_unknown("train", train_doc, _TRAIN_KEYS)
    _reject_unknown("data", data_doc, {"manifest"})
    if "manifest" not in data_doc:
        raise UsageError(f"{path}: data.manifest is required")
    if "epochs" not in train_doc or "seed" not in train_doc:
        raise UsageError(f"{path}: train.epochs and train.seed are required")
    try:
        train_cfg = TrainConfig(**train_doc)
    except SrmbError as exc:
        raise UsageError(f"{path}: invalid train config: {exc}") from exc
    except TypeError as exc:
        raise UsageError(f"{path}: invalid train config: {exc}") from exc
    manifest = Path(path).parent / data_doc["manifest"]
    if not manifest.exists():
        raise UsageError(f"{path}: manifest not found: {manifest}")
    return dict(model_doc), train_cfg, manifest


def cmd_train(args) -> int:
    model_kwargs, train_cfg, manifest = load_run_config(args.config)
    n_phases, dataset = _load_dataset(manifest)
    model_kwargs.setdefault("d_in", dataset[0][0].features.shape[1])
    model_kwargs.setdefault("n_phases", n_phases)
    try:
        model_cfg = ModelConfig(**model_kwargs)
    except SrmbError as exc:
        raise UsageError(f"invalid model config: {exc}") from exc
    model = Model(model_cfg, Generator(PCG64(train_cfg.seed)))
    history = run_training(model, dataset, train_cfg, args.out)
    final = history[-1]
    print(f"epoch {final['epoch']}: loss={final['loss']:.6f} "
          f"loss_r={final['loss_r']:.6f} loss_a={final['loss_a']:.6f} "
          f"lr={final['lr']:.2e}")
    print(f"run directory: {args.out}")
    return 0


def _eval_one(model, feats, phases, n_phases):
    out = model.run(feats.features)
    pred = predict_phases(out)
    return pred, video_metrics(pred, phases.labels, n_phases)


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    n_phases, dataset = _load_dataset(args.data)
    if n_phases != model.config.n_phases:
        raise UsageError(f"dataset has {n_phases} phases but the checkpoint "
                         f"was trained with {model.config.n_phases}")
    with ThreadPoolExecutor(max_workers=_thread_cap()) as pool:
        rows = list(pool.map(
            lambda pair: _eval_one(model, pair[0], pair[1], n_phases), dataset))
    per_video = {feats.video_id: vm
                 for (feats, _), (_, vm) in zip(dataset, rows)}
    agg = aggregate(list(per_video.values()))
    write_report(args.report, per_video, agg)
    if args.ribbon_dir:
        ribbon_dir = Path(args.ribbon_dir)
        ribbon_dir.mkdir(parents=True, exist_ok=True)
        palette = default_palette(n_phases)
        for (feats, phases), (pred, _) in zip(dataset, rows):
            ribbon_export(pred, phases.labels, palette,
                          ribbon_dir / f"{feats.video_id}.ppm")
    mean, std = agg.mean, agg.std
    print(f"AC {mean['accuracy']:.1f} ± {std['accuracy']:.1f} | "
          f"PR {mean['precision']:.1f} ± {std['precision']:.1f} | "
          f"RE {mean['recall']:.1f} ± {std['recall']:.1f} | "
          f"JA {mean['jaccard']:.1f} ± {std['jaccard']:.1f} | "
          f"F1 {mean['macro_f1']:.4f}")
    print(f"report: {args.report}")
    return 0


def cmd_sample(args) -> int:
    phases = dt.load_annotations(args.annotations)
    labels = phases.labels
    sampled = dt.sample_sequence(labels, args.nmax)
    idx = sampled.indices
    print(" ".join(str(i) for i in idx))
    keyframes = set()
    for start, end in dt.segments(labels):
        if start > 0:
            keyframes.update((start - 1, start))
    picked = set(idx.tolist())
    for start, end in dt.segments(labels):
        count = int(np.sum((idx >= start) & (idx <= end)))
        print(f"segment phase={labels[start]} frames=[{start},{end}]: "
              f"picked {count}")
    retained = keyframes <= picked
    print(f"sampled {idx.size} of {labels.size} frames")
    print(f"keyframes retained: {'yes' if retained else 'NO'}")
    return 0 if retained else 1


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srmb",
        description="Selective state-space sequence labeling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run self-verification suites")
    p.add_argument("--suite", default="all", choices=[*SUITES, "all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=None)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--phases", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--future-marker", action="store_true")
    p.add_argument("--marker-lag", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.4)
    p.add_argument("--t-min", type=int, default=400)
    p.add_argument("--t-max", type=int, default=600)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--ribbon-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="preview keyframe-preserving sampling")
    p.add_argument("--annotations", required=True)
    p.add_argument("--nmax", type=int, required=True)
    p.set_defaults(func=cmd_sample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (SrmbError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
