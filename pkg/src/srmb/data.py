"""Phase-labeled sequence data: files, targets, sampling, and synthesis.

Annotations are CSV files of `frame_index,phase_id` rows with frames
contiguous from 0. Features are binary matrices (magic "SRFT"). The sampler
shortens long sequences while keeping every phase transition and its
predecessor frame. The synthetic generator produces desk-scale datasets
whose ambiguous phase pair is resolvable only with future context, for
bidirectional-versus-causal experiments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetError, DomainError, FormatError, ShapeError, VocabularyError

FEATURE_MAGIC = b"SRFT"
FEATURE_VERSION = 1
MARKER_SCALE = 4.0


@dataclass
class PhaseSequence:
    """Per-frame phase ids for one video."""

    video_id: str
    labels: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise ShapeError("labels must be a non-empty vector")
        if np.any(self.labels < 0):
            raise DomainError("phase ids must be non-negative")


@dataclass
class AnticipationTargets:
    """Normalized remaining time within the current phase, one per frame."""

    values: np.ndarray
    horizon: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise DomainError("targets must lie in [0, 1]")


@dataclass
class SampledSequence:
    """Sorted frame indices selected from a source video."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1 or self.indices.size < 1:
            raise ShapeError("indices must be a non-empty vector")
        if np.any(np.diff(self.indices) <= 0):
            raise DomainError("indices must be strictly increasing")


@dataclass
class FeatureSequence:
    """Per-frame feature rows for one video."""

    video_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError("features must be a non-empty (T, D) matrix")
        if not np.all(np.isfinite(self.features)):
            raise DomainError("features contain non-finite values")


def segments(labels) -> list[tuple[int, int]]:
    """Maximal constant-label runs as (start, end) inclusive frame pairs."""
    labels = np.asarray(labels)
    bounds = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds - 1, [labels.size - 1]])
    return list(zip(starts.tolist(), ends.tolist()))


def load_vocabulary(path) -> dict[str, int]:
    """Parse a `name,id` CSV mapping phase names to ids."""
    vocab: dict[str, int] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"{path}: line {lineno}: expected `name,id`")
        name = parts[0].strip()
        try:
            pid = int(parts[1])
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: bad id {parts[1]!r}") from None
        if name in vocab:
            raise FormatError(f"{path}: line {lineno}: duplicate name {name!r}")
        vocab[name] = pid
    if not vocab:
        raise FormatError(f"{path}: empty vocabulary")
    return vocab


def load_annotations(path, vocabulary: dict[str, int] | None = None) -> PhaseSequence:
    """Parse a `frame_index,phase` CSV; frames must be contiguous from 0.

    The phase field is a numeric id, or a name resolved through
    ``vocabulary`` when given.
    """
    text = Path(path).read_text(encoding="utf-8")
    labels: list[int] = []
    expected = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"{path}: line {lineno}: expected `frame,phase`")
        try:
            frame = int(parts[0])
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: bad frame {parts[0]!r}") from None
        if frame != expected:
            raise FormatError(
                f"{path}: line {lineno}: expected frame {expected}, got {frame}")
        field = parts[1].strip()
        try:
            pid = int(field)
        except ValueError:
            if vocabulary is None or field not in vocabulary:
                raise VocabularyError(
                    f"{path}: line {lineno}: unknown phase name {field!r}") from None
            pid = vocabulary[field]
        if pid < 0:
            raise FormatError(f"{path}: line {lineno}: negative phase id {pid}")
        labels.append(pid)
        expected += 1
    if not labels:
        raise FormatError(f"{path}: empty annotation file")
    return PhaseSequence(video_id=Path(path).stem, labels=np.array(labels))


def write_annotations(path, seq: PhaseSequence) -> None:
    lines = [f"{t},{int(p)}" for t, p in enumerate(seq.labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def make_anticipation_targets(labels, horizon: int) -> AnticipationTargets:
    """a_t = min(e - t, horizon)/horizon, e = last frame of t's segment.

    The final segment's remaining time counts down to the end of the video,
    so every frame carries a target and segment-final frames are exactly 0.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    labels = np.asarray(labels)
    values = np.empty(labels.size, dtype=np.float64)
    for start, end in segments(labels):
        t = np.arange(start, end + 1)
        values[start:end + 1] = np.minimum(end - t, horizon) / horizon
    return AnticipationTargets(values=values, horizon=horizon)


def sample_sequence(labels, n_max: int,
                    rng: np.random.Generator | None = None) -> SampledSequence:
    """Pick min(T, n_max) frames keeping transitions and their predecessors.

    After reserving each transition frame and its predecessor, the remaining
    budget is split across segments proportionally to their lengths
    (largest-remainder rounding, clamped to each segment's free capacity),
    then filled with evenly spaced frames per segment. A generator shifts
    each segment's sampling phase randomly; without one the offset is
    centered, making the result deterministic.
    """
    labels = np.asarray(labels)
    t_total = labels.size
    if t_total < 1:
        raise ShapeError("labels must be non-empty")
    if t_total <= n_max:
        return SampledSequence(indices=np.arange(t_total))

    segs = segments(labels)
    transitions = [s for s, _ in segs[1:]]
    required = 2 * len(transitions) + len(segs)
    if n_max < required:
        raise BudgetError(
            f"budget {n_max} cannot hold keyframes: need at least {required}")

    mandatory: set[int] = set()
    for s in transitions:
        mandatory.add(s)
        mandatory.add(s - 1)

    budget = n_max - len(mandatory)
    candidates = [
        [f for f in range(start, end + 1) if f not in mandatory]
        for start, end in segs
    ]
    caps = [len(c) for c in candidates]
    exact = [budget * (end - start + 1) / t_total for start, end in segs]
    quotas = [min(int(np.floor(q)), cap) for q, cap in zip(exact, caps)]
    order = sorted(range(len(segs)), key=lambda i: (-(exact[i] - np.floor(exact[i])), i))
    leftover = budget - sum(quotas)
    while leftover > 0:
        placed = False
        for i in order:
            if quotas[i] < caps[i]:
                quotas[i] += 1
                leftover -= 1
                placed = True
                if leftover == 0:
                    break
        if not placed:
            raise BudgetError("free capacity exhausted before budget placed")

    picks: list[int] = sorted(mandatory)
    for cand, k in zip(candidates, quotas):
        if k == 0:
            continue
        offset = rng.random() if rng is not None else 0.5
        step = len(cand) / k
        picks.extend(cand[int((j + offset) * step)] for j in range(k))
    return SampledSequence(indices=np.array(sorted(picks)))


# --- synthetic data ---------------------------------------------------------


@dataclass
class SynthConfig:
    """Generator settings for synthetic phase-labeled feature sequences."""

    n_videos: int = 10
    n_phases: int = 8
    t_range: tuple[int, int] = (400, 600)
    feature_dim: int = 16
    noise_sigma: float = 0.4
    future_marker: bool = False
    marker_lag: int = 10
    duration_range: tuple[int, int] = (6, 12)

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        self.duration_range = tuple(self.duration_range)
        if self.n_videos < 1:
            raise DomainError("n_videos must be >= 1")
        if self.n_phases < 2:
            raise DomainError("n_phases must be >= 2")
        if self.future_marker and self.n_phases < 3:
            raise DomainError("future_marker needs n_phases >= 3 (a spare pair)")
        if self.future_marker and self.feature_dim < 2:
            raise DomainError("future_marker reserves one feature dimension")
        if not 1 <= self.t_range[0] <= self.t_range[1]:
            raise DomainError(f"bad t_range {self.t_range}")
        if not 1 <= self.duration_range[0] <= self.duration_range[1]:
            raise DomainError(f"bad duration_range {self.duration_range}")
        if self.marker_lag < 1:
            raise DomainError("marker_lag must be >= 1")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")


def _synth_labels(cfg: SynthConfig, t_target: int, rng: np.random.Generator):
    """Segment labels and durations covering at least t_target frames.

    Labels progress through a fixed cyclic order with random durations.
    With future_marker, ordinary phases 0..P-3 alternate with a coin-flip
    member of the pair (P-2, P-1); the pair's segments are long enough to
    contain the marker frame.
    """
    seg_labels: list[int] = []
    seg_durations: list[int] = []
    total = 0
    slot = 0
    d_lo, d_hi = cfg.duration_range
    while total < t_target:
        if cfg.future_marker:
            if slot % 2 == 0:
                label = (slot // 2) % (cfg.n_phases - 2)
                dur = int(rng.integers(d_lo, d_hi + 1))
            else:
                label = cfg.n_phases - 2 + int(rng.integers(2))
                dur = int(rng.integers(cfg.marker_lag + 2, cfg.marker_lag + 7))
        else:
            label = slot % cfg.n_phases
            dur = int(rng.integers(d_lo, d_hi + 1))
        seg_labels.append(label)
        seg_durations.append(dur)
        total += dur
        slot += 1
    return seg_labels, seg_durations


def synth_generate(cfg: SynthConfig, seed: int):
    """Deterministic synthetic dataset: [(FeatureSequence, PhaseSequence)].

    Every phase gets a Gaussian prototype; frames are prototype plus
    isotropic noise. With future_marker the pair (P-2, P-1) shares one
    prototype and differs only in a +/-MARKER_SCALE pulse on the last
    feature dimension, marker_lag frames after the segment starts, so the
    pair is separable only by looking ahead.
    """
    root = np.random.SeedSequence(seed)
    proto_ss, *video_ss = root.spawn(cfg.n_videos + 1)
    proto_rng = np.random.Generator(np.random.PCG64(proto_ss))
    prototypes = proto_rng.normal(size=(cfg.n_phases, cfg.feature_dim))
    if cfg.future_marker:
        prototypes[cfg.n_phases - 1] = prototypes[cfg.n_phases - 2]
        prototypes[:, -1] = 0.0

    out = []
    for vidx, ss in enumerate(video_ss):
        rng = np.random.Generator(np.random.PCG64(ss))
        t_target = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        seg_labels, seg_durations = _synth_labels(cfg, t_target, rng)
        labels = np.repeat(seg_labels, seg_durations)[:t_target]
        feats = prototypes[labels] + cfg.noise_sigma * rng.normal(
            size=(t_target, cfg.feature_dim))
        if cfg.future_marker:
            start = 0
            for label, dur in zip(seg_labels, seg_durations):
                mark = start + cfg.marker_lag
                if label >= cfg.n_phases - 2 and mark < t_target:
                    sign = 1.0 if label == cfg.n_phases - 2 else -1.0
                    feats[mark, -1] += sign * MARKER_SCALE
                start += dur
                if start >= t_target:
                    break
        video_id = f"synth{vidx:03d}"
        out.append((FeatureSequence(video_id=video_id, features=feats),
                    PhaseSequence(video_id=video_id, labels=labels)))
    return out


# --- feature files and manifests -------------------------------------------


def write_features(path, seq: FeatureSequence) -> None:
    """Write the binary feature format: SRFT, version, T, D, float64 rows."""
    t_len, dim = seq.features.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, t_len, dim))
        f.write(seq.features.astype("<f8").tobytes(order="C"))


def load_features(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: too short for a feature file header")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, t_len, dim = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = 16 + 8 * t_len * dim
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    if t_len < 1 or dim < 1:
        raise FormatError(f"{path}: empty feature matrix {t_len}x{dim}")
    feats = np.frombuffer(raw[16:], dtype="<f8").reshape(t_len, dim)
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{path}: non-finite feature values")
    return FeatureSequence(video_id=Path(path).stem,
                           features=feats.astype(np.float64))


def write_manifest(path, n_phases: int, videos: list[dict],
                   generator: SynthConfig | None = None,
                   seed: int | None = None) -> None:
    """JSON manifest listing a dataset's videos and how they were made."""
    doc = {"n_phases": n_phases, "videos": videos}
    if generator is not None:
        doc["generator"] = dict(asdict(generator), seed=seed)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_manifest(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "n_phases" not in doc or "videos" not in doc:
        raise FormatError(f"{path}: manifest needs n_phases and videos")
    for entry in doc["videos"]:
        if "id" not in entry or "features" not in entry or "annotations" not in entry:
            raise FormatError(f"{path}: video entries need id, features, annotations")
    return doc
