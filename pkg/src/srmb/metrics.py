"""Frame-wise evaluation metrics and ribbon visualization export.

Per video: accuracy plus per-phase precision / recall / Jaccard, all as
percentages. Video-level recall and Jaccard average over the phases present
in that video's ground truth; precision additionally counts predicted-but-
absent phases as zeros. Macro F1 (a fraction in [0, 1]) averages per-class
F1 over the truth's classes. Aggregation reports mean and population
standard deviation across videos. Metrics are strict and frame-wise — no
boundary-relaxation windows.

The ribbon export writes a two-row color strip (truth above, prediction
below, one pixel column per frame) as a binary PPM plus a CSV of
(frame, truth, pred).
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ShapeError

#: Height in pixels of each of the two ribbon rows.
RIBBON_ROW_HEIGHT = 12


@dataclass
class VideoMetrics:
    """Percent-scale metrics for one video plus its fractional macro F1."""

    accuracy: float
    precision: float
    recall: float
    jaccard: float
    macro_f1: float
    per_phase: dict[int, dict[str, float]] = field(default_factory=dict)


@dataclass
class AggregateReport:
    """Mean and population standard deviation of each metric across videos."""

    mean: dict[str, float]
    std: dict[str, float]
    n_videos: int


def _checked(pred, truth, n_phases):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(
            f"prediction {pred.shape} and truth {truth.shape} must be equal-length 1-D")
    if pred.size == 0:
        raise DomainError("metric input is empty")
    for name, ids in (("pred", pred), ("truth", truth)):
        if ids.min() < 0 or ids.max() >= n_phases:
            raise DomainError(f"{name} ids must lie in [0, {n_phases})")
    return pred, truth


def _confusion(pred, truth, phase):
    tp = int(np.sum((pred == phase) & (truth == phase)))
    fp = int(np.sum((pred == phase) & (truth != phase)))
    fn = int(np.sum((pred != phase) & (truth == phase)))
    return tp, fp, fn


def _ratio(num, den):
    return num / den if den else 0.0


def video_metrics(pred, truth, n_phases: int) -> VideoMetrics:
    """Accuracy and per-phase PR/RE/JA for one video, in percent.

    Recall and Jaccard average over phases present in the truth; precision
    also includes predicted phases absent from the truth, each contributing
    zero. Phases absent from both are excluded entirely.
    """
    pred, truth = _checked(pred, truth, n_phases)
    accuracy = 100.0 * float(np.mean(pred == truth))
    truth_set = set(np.unique(truth).tolist())
    pred_set = set(np.unique(pred).tolist())
    per_phase: dict[int, dict[str, float]] = {}
    for phase in sorted(truth_set | pred_set):
        tp, fp, fn = _confusion(pred, truth, phase)
        per_phase[phase] = {
            "precision": 100.0 * _ratio(tp, tp + fp),
            "recall": 100.0 * _ratio(tp, tp + fn),
            "jaccard": 100.0 * _ratio(tp, tp + fp + fn),
            "in_truth": phase in truth_set,
        }
    pr_values = [m["precision"] for m in per_phase.values()]
    truth_rows = [m for p, m in per_phase.items() if p in truth_set]
    return VideoMetrics(
        accuracy=accuracy,
        precision=float(np.mean(pr_values)),
        recall=float(np.mean([m["recall"] for m in truth_rows])),
        jaccard=float(np.mean([m["jaccard"] for m in truth_rows])),
        macro_f1=macro_f1(pred, truth, n_phases),
        per_phase=per_phase,
    )


def macro_f1(pred, truth, n_phases: int) -> float:
    """Macro-averaged F1 over the truth's classes, as a fraction in [0, 1]."""
    pred, truth = _checked(pred, truth, n_phases)
    scores = []
    for phase in np.unique(truth):
        tp, fp, fn = _confusion(pred, truth, phase)
        pr = _ratio(tp, tp + fp)
        re = _ratio(tp, tp + fn)
        scores.append(_ratio(2.0 * pr * re, pr + re))
    return float(np.mean(scores))


_METRIC_FIELDS = ("accuracy", "precision", "recall", "jaccard", "macro_f1")


def aggregate(videos: list[VideoMetrics]) -> AggregateReport:
    """Mean and population standard deviation of each metric across videos."""
    if not videos:
        raise DomainError("cannot aggregate an empty list of videos")
    mean, std = {}, {}
    for name in _METRIC_FIELDS:
        values = np.array([getattr(v, name) for v in videos])
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=0))
    return AggregateReport(mean=mean, std=std, n_videos=len(videos))


def default_palette(n: int) -> list[tuple[int, int, int]]:
    """n visually distinct RGB colors, evenly spaced around the hue wheel."""
    if n < 1:
        raise DomainError(f"palette size must be >= 1, got {n}")
    palette = []
    for i in range(n):
        r, g, b = colorsys.hsv_to_rgb(i / n, 0.75, 0.95)
        palette.append((round(255 * r), round(255 * g), round(255 * b)))
    return palette


def ribbon_export(pred, truth, palette, path) -> None:
    """Write the two-row ribbon PPM at ``path`` and a CSV beside it.

    The image is binary PPM (P6), one pixel column per frame, with the truth
    strip above the prediction strip, each RIBBON_ROW_HEIGHT pixels tall.
    The CSV (``path`` with its suffix replaced by .csv) holds one
    (frame, truth, pred) row per frame.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise ShapeError("prediction and truth must be equal-length non-empty 1-D")
    n_needed = int(max(pred.max(), truth.max())) + 1
    if len(palette) < n_needed:
        raise DomainError(
            f"palette has {len(palette)} colors but ids require {n_needed}")
    colors = np.asarray(palette, dtype=np.uint8)
    t_len = pred.size
    rows = np.empty((2 * RIBBON_ROW_HEIGHT, t_len, 3), dtype=np.uint8)
    rows[:RIBBON_ROW_HEIGHT] = colors[truth][None, :, :]
    rows[RIBBON_ROW_HEIGHT:] = colors[pred][None, :, :]
    path = Path(path)
    header = f"P6\n{t_len} {2 * RIBBON_ROW_HEIGHT}\n255\n".encode("ascii")
    path.write_bytes(header + rows.tobytes())
    lines = ["frame,truth,pred"]
    lines += [f"{i},{truth[i]},{pred[i]}" for i in range(t_len)]
    path.with_suffix(".csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ribbon_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back (truth, pred) from a ribbon CSV."""
    text = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if not text or text[0] != "frame,truth,pred":
        raise FormatError(f"{path}: missing ribbon CSV header")
    truth, pred = [], []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path} line {lineno}: expected 3 fields")
        try:
            frame, t, p = (int(v) for v in parts)
        except ValueError as exc:
            raise FormatError(f"{path} line {lineno}: non-integer field") from exc
        if frame != lineno - 2:
            raise FormatError(f"{path} line {lineno}: frames must count from 0")
        truth.append(t)
        pred.append(p)
    return np.array(truth, dtype=np.int64), np.array(pred, dtype=np.int64)


def report_dict(per_video: dict[str, VideoMetrics],
                agg: AggregateReport) -> dict:
    """JSON-ready report: per-video metrics plus the aggregate block."""
    videos = {}
    for video_id, vm in per_video.items():
        videos[video_id] = {name: getattr(vm, name) for name in _METRIC_FIELDS}
        videos[video_id]["per_phase"] = {
            str(p): vals for p, vals in vm.per_phase.items()}
    return {
        "videos": videos,
        "aggregate": {"mean": agg.mean, "std": agg.std,
                      "n_videos": agg.n_videos},
    }


def write_report(path, per_video: dict[str, VideoMetrics],
                 agg: AggregateReport) -> None:
    Path(path).write_text(
        json.dumps(report_dict(per_video, agg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
