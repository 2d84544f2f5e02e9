"""Unit tests for annotations, targets, the sampler, and synthesis."""

import numpy as np
import pytest
from numpy.random import PCG64, Generator

from srmb import data as dt
from srmb.errors import (BudgetError, DomainError, FormatError, ShapeError,
                         VocabularyError)


def random_labels(rng, n_segments=None, dur_lo=3, dur_hi=50, n_phases=6):
    n_seg = n_segments or int(rng.integers(2, 12))
    labels = []
    prev = -1
    for _ in range(n_seg):
        phase = int(rng.integers(0, n_phases))
        while phase == prev:
            phase = int(rng.integers(0, n_phases))
        labels.extend([phase] * int(rng.integers(dur_lo, dur_hi + 1)))
        prev = phase
    return np.array(labels)


# --- annotations ------------------------------------------------------------


def test_parse_simple_annotation(tmp_path):
    p = tmp_path / "vid01.csv"
    p.write_text("0,2\n1,2\n2,5\n")
    seq = dt.load_annotations(p)
    assert seq.video_id == "vid01"
    np.testing.assert_array_equal(seq.labels, [2, 2, 5])


def test_annotation_gap_reports_line(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("0,1\n2,1\n")
    with pytest.raises(FormatError, match="line 2"):
        dt.load_annotations(p)


def test_annotation_duplicate_frame(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("0,1\n0,2\n")
    with pytest.raises(FormatError, match="line 2"):
        dt.load_annotations(p)


def test_annotation_empty_file(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("")
    with pytest.raises(FormatError):
        dt.load_annotations(p)


def test_annotation_named_phases(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("0,prep\n1,prep\n2,cut\n")
    vocab = {"prep": 0, "cut": 3}
    seq = dt.load_annotations(p, vocabulary=vocab)
    np.testing.assert_array_equal(seq.labels, [0, 0, 3])
    bad = tmp_path / "b.csv"
    bad.write_text("0,prep\n1,sew\n")
    with pytest.raises(VocabularyError, match="sew"):
        dt.load_annotations(bad, vocabulary=vocab)
    with pytest.raises(VocabularyError):
        dt.load_annotations(p)  # names need a vocabulary


def test_annotation_roundtrip(tmp_path):
    seq = dt.PhaseSequence(video_id="x", labels=np.array([0, 0, 1, 2, 2, 2]))
    p = tmp_path / "x.csv"
    dt.write_annotations(p, seq)
    np.testing.assert_array_equal(dt.load_annotations(p).labels, seq.labels)


def test_vocabulary_file(tmp_path):
    p = tmp_path / "vocab.csv"
    p.write_text("prep,0\ncut,1\n")
    assert dt.load_vocabulary(p) == {"prep": 0, "cut": 1}
    dup = tmp_path / "dup.csv"
    dup.write_text("a,0\na,1\n")
    with pytest.raises(FormatError):
        dt.load_vocabulary(dup)


# --- anticipation targets ---------------------------------------------------


def test_targets_single_phase():
    t = dt.make_anticipation_targets(np.zeros(5, dtype=int), 3)
    np.testing.assert_allclose(t.values, [1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0])


def test_targets_two_segments():
    t = dt.make_anticipation_targets(np.array([0, 0, 0, 1, 1]), 2)
    np.testing.assert_allclose(t.values, [1.0, 0.5, 0.0, 0.5, 0.0])


def test_targets_invariants_random():
    rng = Generator(PCG64(1))
    for _ in range(50):
        labels = random_labels(rng)
        h = int(rng.integers(1, 40))
        vals = dt.make_anticipation_targets(labels, h).values
        ends = {e for _, e in dt.segments(labels)}
        for t in range(labels.size):
            e = min(e2 for _, e2 in dt.segments(labels) if e2 >= t and
                    labels[e2] == labels[t] and
                    all(labels[q] == labels[t] for q in range(t, e2 + 1)))
            assert (vals[t] == 0.0) == (t in ends)
            assert (vals[t] == 1.0) == (e - t >= h)


def test_targets_reject_bad_horizon():
    with pytest.raises(DomainError):
        dt.make_anticipation_targets(np.zeros(3, dtype=int), 0)


# --- sampler ----------------------------------------------------------------


def test_sampler_identity_when_short():
    labels = np.repeat([0, 1], 50)
    out = dt.sample_sequence(labels, 2048)
    np.testing.assert_array_equal(out.indices, np.arange(100))


def test_sampler_equal_segments_proportional():
    labels = np.repeat([0, 1], 1000)
    out = dt.sample_sequence(labels, 200)
    assert out.indices.size == 200
    assert 999 in out.indices and 1000 in out.indices
    first = int(np.sum(out.indices < 1000))
    assert abs(first - 100) <= 1


def test_sampler_budget_error_reports_minimum():
    labels = np.repeat(np.arange(10), 30)
    required = 2 * 9 + 10
    with pytest.raises(BudgetError, match=str(required)):
        dt.sample_sequence(labels, required - 1)


def test_sampler_minimum_budget_boundary():
    labels = np.repeat(np.arange(10), 30)
    required = 2 * 9 + 10
    out = dt.sample_sequence(labels, required)
    assert out.indices.size == required
    for s, _ in dt.segments(labels)[1:]:
        assert s in out.indices and s - 1 in out.indices


def test_sampler_keyframes_and_length_random():
    rng = Generator(PCG64(2))
    for _ in range(200):
        labels = random_labels(rng)
        segs = dt.segments(labels)
        required = 2 * (len(segs) - 1) + len(segs)
        if labels.size <= required:
            continue
        n_max = int(rng.integers(required, labels.size))
        out = dt.sample_sequence(labels, n_max)
        assert out.indices.size == min(labels.size, n_max)
        assert np.unique(out.indices).size == out.indices.size
        for s, _ in segs[1:]:
            assert s in out.indices and s - 1 in out.indices


def test_sampler_within_one_proportionality():
    rng = Generator(PCG64(3))
    for _ in range(100):
        labels = random_labels(rng, dur_lo=6, dur_hi=60)
        segs = dt.segments(labels)
        t_total = labels.size
        n_max = max(2 * (len(segs) - 1) + len(segs), int(0.5 * t_total))
        if t_total <= n_max:
            continue
        out = dt.sample_sequence(labels, n_max)
        mandatory = set()
        for s, _ in segs[1:]:
            mandatory.update((s, s - 1))
        budget = n_max - len(mandatory)
        for start, end in segs:
            seg_len = end - start + 1
            exact = budget * seg_len / t_total
            inseg = out.indices[(out.indices >= start) & (out.indices <= end)]
            free = inseg.size - sum(1 for m in mandatory if start <= m <= end)
            assert abs(free - exact) <= 1.0, (free, exact)


def test_sampler_deterministic_and_jittered():
    labels = np.repeat([0, 1, 2, 3], 100)
    a = dt.sample_sequence(labels, 60)
    b = dt.sample_sequence(labels, 60)
    np.testing.assert_array_equal(a.indices, b.indices)
    c = dt.sample_sequence(labels, 60, rng=Generator(PCG64(4)))
    assert c.indices.size == 60
    for s, _ in dt.segments(labels)[1:]:
        assert s in c.indices and s - 1 in c.indices
    assert np.any(c.indices != a.indices)


# --- synthetic generator ----------------------------------------------------


def test_synth_deterministic():
    cfg = dt.SynthConfig(n_videos=3, t_range=(80, 120))
    a = dt.synth_generate(cfg, seed=7)
    b = dt.synth_generate(cfg, seed=7)
    for (fa, pa), (fb, pb) in zip(a, b):
        assert fa.features.tobytes() == fb.features.tobytes()
        assert pa.labels.tobytes() == pb.labels.tobytes()
    c = dt.synth_generate(cfg, seed=8)
    assert any(x.features.tobytes() != y.features.tobytes()
               for (x, _), (y, _) in zip(a, c))


def test_synth_clean_data_is_separable():
    cfg = dt.SynthConfig(n_videos=2, n_phases=5, t_range=(60, 80),
                         noise_sigma=0.0, future_marker=False)
    for feats, phases in dt.synth_generate(cfg, seed=1):
        protos = {}
        for t in range(phases.labels.size):
            key = phases.labels[t]
            row = feats.features[t]
            if key in protos:
                np.testing.assert_array_equal(protos[key], row)
            else:
                protos[key] = row
        # distinct phases have distinct prototypes
        keys = sorted(protos)
        for i in keys:
            for j in keys:
                if i < j:
                    assert np.any(protos[i] != protos[j])


def test_synth_marker_structure():
    cfg = dt.SynthConfig(n_videos=4, n_phases=8, t_range=(300, 400),
                         noise_sigma=0.0, future_marker=True, marker_lag=10)
    pair = {6, 7}
    for feats, phases in dt.synth_generate(cfg, seed=2):
        f, labels = feats.features, phases.labels
        for start, end in dt.segments(labels):
            lab = labels[start]
            if lab in pair:
                mark = start + cfg.marker_lag
                # before the marker the two pair members are identical
                np.testing.assert_array_equal(
                    f[start:min(mark, end + 1)],
                    np.tile(f[start], (min(mark, end + 1) - start, 1)))
                if mark <= end:
                    want = dt.MARKER_SCALE if lab == 6 else -dt.MARKER_SCALE
                    assert f[mark, -1] == want
            else:
                # marker channel silent outside pair segments
                np.testing.assert_array_equal(f[start:end + 1, -1],
                                              np.zeros(end - start + 1))


def test_synth_pair_prototypes_identical():
    cfg = dt.SynthConfig(n_videos=6, n_phases=8, t_range=(300, 400),
                         noise_sigma=0.0, future_marker=True, marker_lag=10)
    rows = {6: None, 7: None}
    for feats, phases in dt.synth_generate(cfg, seed=3):
        for start, end in dt.segments(phases.labels):
            lab = int(phases.labels[start])
            if lab in rows and rows[lab] is None:
                rows[lab] = feats.features[start]
    assert rows[6] is not None and rows[7] is not None
    np.testing.assert_array_equal(rows[6], rows[7])


def test_synth_config_validation():
    with pytest.raises(DomainError):
        dt.SynthConfig(n_phases=1)
    with pytest.raises(DomainError):
        dt.SynthConfig(n_phases=2, future_marker=True)
    with pytest.raises(DomainError):
        dt.SynthConfig(t_range=(10, 5))
    with pytest.raises(DomainError):
        dt.SynthConfig(noise_sigma=-1.0)


# --- feature files and manifests --------------------------------------------


def test_feature_roundtrip(tmp_path):
    rng = Generator(PCG64(5))
    seq = dt.FeatureSequence(video_id="v", features=rng.normal(size=(9, 4)))
    p = tmp_path / "v.srft"
    dt.write_features(p, seq)
    back = dt.load_features(p)
    assert back.features.tobytes() == seq.features.tobytes()


def test_feature_header_example(tmp_path):
    import struct
    p = tmp_path / "h.srft"
    payload = struct.pack("<6d", *range(6))
    p.write_bytes(b"SRFT" + struct.pack("<III", 1, 2, 3) + payload)
    f = dt.load_features(p)
    np.testing.assert_array_equal(f.features, np.arange(6.0).reshape(2, 3))


def test_feature_corruption(tmp_path):
    rng = Generator(PCG64(6))
    seq = dt.FeatureSequence(video_id="v", features=rng.normal(size=(4, 2)))
    p = tmp_path / "v.srft"
    dt.write_features(p, seq)
    raw = p.read_bytes()

    bad = tmp_path / "bad.srft"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        dt.load_features(bad)

    short = tmp_path / "short.srft"
    short.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        dt.load_features(short)

    nan = tmp_path / "nan.srft"
    corrupt = bytearray(raw)
    corrupt[16:24] = np.array([np.nan]).tobytes()
    nan.write_bytes(bytes(corrupt))
    with pytest.raises(FormatError, match="finite"):
        dt.load_features(nan)


def test_manifest_roundtrip(tmp_path):
    cfg = dt.SynthConfig(n_videos=2)
    p = tmp_path / "manifest.json"
    videos = [{"id": "a", "features": "a.srft", "annotations": "a.csv"}]
    dt.write_manifest(p, n_phases=8, videos=videos, generator=cfg, seed=5)
    doc = dt.load_manifest(p)
    assert doc["n_phases"] == 8
    assert doc["videos"][0]["id"] == "a"
    assert doc["generator"]["seed"] == 5
    bad = tmp_path / "bad.json"
    bad.write_text("{\"videos\": []}")
    with pytest.raises(FormatError):
        dt.load_manifest(bad)
    notjson = tmp_path / "nj.json"
    notjson.write_text("{{{")
    with pytest.raises(FormatError):
        dt.load_manifest(notjson)
