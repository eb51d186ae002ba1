import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from affex.data import (
    NUM_CLASSES,
    VA_PROTOTYPES,
    DatasetManifest,
    ExpressionLabel,
    FrameRecord,
    SyntheticConfig,
    VAAnnotation,
    VideoSequence,
    balanced_draw,
    balanced_sample,
    build_blocks,
    class_prototypes,
    generate_synthetic,
    load_manifest,
    mirror_slice,
    read_payload,
    write_manifest,
    write_payload,
)
from affex.errors import (
    EmptyDatasetError,
    InvalidWindowError,
    ManifestParseError,
    RangeError,
    ValidationError,
)


def _video(vid, n):
    return VideoSequence(vid, tuple(FrameRecord(vid, k, f"{vid}/{k}.bin") for k in range(n)))


def _write_manifest_file(path, rows, dim=3):
    lines = [json.dumps({"descriptor_dim": dim})] + [json.dumps(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _manifest_with_classes(counts):
    frames, k = [], 0
    for label, n in counts.items():
        for _ in range(n):
            frames.append(FrameRecord("v", k, "p", ExpressionLabel(label)))
            k += 1
    return DatasetManifest(4, (VideoSequence("v", tuple(frames)),))


# -- types


def test_expression_label_names_round_trip():
    names = ["NEUTRAL", "ANGRY", "DISGUST", "FEAR", "HAPPY", "SAD", "SURPRISE"]
    assert [ExpressionLabel(i).name for i in range(7)] == names
    for label in ExpressionLabel:
        assert ExpressionLabel.from_name(label.name.lower()) is label
    with pytest.raises(ValidationError):
        ExpressionLabel.from_name("contempt")


def test_va_annotation_range():
    VAAnnotation(1.0, -1.0)
    with pytest.raises(RangeError):
        VAAnnotation(1.5, 0.0)
    with pytest.raises(RangeError):
        VAAnnotation(0.0, -1.01)


def test_video_requires_increasing_frames():
    with pytest.raises(ValidationError):
        VideoSequence("v", (FrameRecord("v", 2, "a"), FrameRecord("v", 2, "b")))
    with pytest.raises(ValidationError):
        VideoSequence("v", (FrameRecord("w", 0, "a"),))


def test_payload_round_trip(tmp_path):
    vec = np.array([0.5, -1.25, 3.0])
    write_payload(tmp_path / "p.bin", vec)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == (3).to_bytes(4, "little")
    np.testing.assert_array_equal(read_payload(tmp_path / "p.bin"), vec)
    (tmp_path / "bad.bin").write_bytes(raw[:-2])
    with pytest.raises(ValidationError):
        read_payload(tmp_path / "bad.bin")


# -- load_manifest


def test_filter_by_expression(tmp_path):
    rows = []
    for k in range(10):
        rows.append({"video": "a", "frame": k, "payload": "x", "expr": None if k in (1, 4, 7) else k % 7})
    _write_manifest_file(tmp_path / "m.jsonl", rows)
    m = load_manifest(tmp_path / "m.jsonl", require="expression", load_payloads=False)
    assert m.num_frames == 7
    assert [r.frame_index for r in m.videos[0].frames] == [0, 2, 3, 5, 6, 8, 9]
    assert sum(len(v) for v in m.class_index.values()) == 7


def test_out_of_range_valence_names_line(tmp_path):
    rows = [{"video": "a", "frame": k, "payload": "x", "valence": 0.1, "arousal": 0.1} for k in range(5)]
    rows[2]["valence"] = 1.5  # header is line 1, so this frame is line 4
    _write_manifest_file(tmp_path / "m.jsonl", rows)
    with pytest.raises(ValidationError, match="line 4"):
        load_manifest(tmp_path / "m.jsonl", load_payloads=False)


def test_parse_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"descriptor_dim": 2}\n{"video": "a", "frame": 0, "payload": "x"}\nnot json\n')
    with pytest.raises(ManifestParseError) as info:
        load_manifest(p, load_payloads=False)
    assert info.value.line_no == 3
    _write_manifest_file(p, [{"video": "a", "frame": 0, "payload": "x", "expr": 7}])
    with pytest.raises(ValidationError, match="line 2"):
        load_manifest(p, load_payloads=False)


def test_empty_after_filter(tmp_path):
    _write_manifest_file(tmp_path / "m.jsonl", [{"video": "a", "frame": 0, "payload": "x"}])
    with pytest.raises(EmptyDatasetError):
        load_manifest(tmp_path / "m.jsonl", require="va", load_payloads=False)


def test_payload_length_checked(tmp_path):
    write_payload(tmp_path / "p.bin", np.zeros(2))
    _write_manifest_file(tmp_path / "m.jsonl", [{"video": "a", "frame": 0, "payload": "p.bin"}], dim=3)
    with pytest.raises(ValidationError, match="descriptor_dim"):
        load_manifest(tmp_path / "m.jsonl")


def test_synthetic_reload_is_identical(tmp_path):
    m = generate_synthetic(SyntheticConfig(num_videos=3, frames_per_video=20), tmp_path)
    again = load_manifest(tmp_path / "manifest.jsonl")
    assert again == m
    write_manifest(again, tmp_path / "copy.jsonl")
    assert load_manifest(tmp_path / "copy.jsonl") == m
    for vid, arr in m.descriptors.items():
        np.testing.assert_array_equal(arr, again.descriptors[vid])


# -- blocks


def test_blocks_clamp_at_start():
    video = _video("v", 3)
    f = video.frames
    blocks = build_blocks(video, 2)
    assert [b.frames for b in blocks] == [(f[0], f[0]), (f[0], f[1]), (f[1], f[2])]


def test_blocks_window_arithmetic():
    video = _video("v", 40)
    blocks = build_blocks(video, 16)
    assert len(blocks) == 40
    assert [r.frame_index for r in blocks[39].frames] == list(range(24, 40))


def test_blocks_s1_and_invalid():
    video = _video("v", 5)
    assert all(b.frames == (video.frames[k],) for k, b in enumerate(build_blocks(video, 1)))
    with pytest.raises(InvalidWindowError):
        build_blocks(video, 0)


@given(n=st.integers(1, 30), s=st.integers(1, 20))
def test_blocks_invariants(n, s):
    video = _video("v", n)
    blocks = build_blocks(video, s)
    assert len(blocks) == n
    for k, b in enumerate(blocks):
        assert len(b.frames) == s
        assert b.current is video.frames[k]
        idx = [r.frame_index for r in b.frames]
        assert idx == sorted(idx)
        assert {r.video_id for r in b.frames} == {"v"}


# -- sampling


def test_balanced_sample_imbalanced():
    m = _manifest_with_classes({0: 1000, 4: 10})
    draws = balanced_sample(m, 10_000, seed=3)
    lookup = {(r.video_id, r.frame_index): int(r.expression) for r in m.iter_frames()}
    freq4 = np.mean([lookup[k] == 4 for k in draws])
    assert 0.45 <= freq4 <= 0.55


def test_balanced_sample_deterministic_and_forced():
    m = _manifest_with_classes({2: 5, 3: 7})
    assert balanced_sample(m, 50, 9) == balanced_sample(m, 50, 9)
    single = _manifest_with_classes({6: 4})
    assert {k for k in balanced_sample(single, 100, 0)} <= set(single.class_index[ExpressionLabel.SURPRISE])


def test_balanced_sample_uniform_chi_square():
    m = _manifest_with_classes({0: 300, 1: 3, 3: 30, 5: 120})
    lookup = {(r.video_id, r.frame_index): int(r.expression) for r in m.iter_frames()}
    labels = [lookup[k] for k in balanced_sample(m, 10_000, seed=11)]
    counts = np.array([labels.count(c) for c in (0, 1, 3, 5)])
    assert stats.chisquare(counts).pvalue > 0.001


def test_balanced_sample_within_class_uniform():
    m = _manifest_with_classes({0: 5, 1: 1})
    draws = balanced_sample(m, 20_000, seed=5)
    class0 = [k for k in draws if k[1] < 5]
    counts = np.bincount([k[1] for k in class0], minlength=5)
    assert stats.chisquare(counts).pvalue > 0.001


def test_balanced_sample_empty():
    m = DatasetManifest(2, (_video("v", 3),))
    with pytest.raises(EmptyDatasetError):
        balanced_sample(m, 4, 0)
    with pytest.raises(EmptyDatasetError):
        balanced_draw({0: ()}, 3, np.random.default_rng(0))


# -- synthetic generator


def test_prototypes_unit_norm_and_off_mirror_half():
    for dim in (4, 16, 33):
        p = class_prototypes(dim)
        assert p.shape == (NUM_CLASSES, dim)
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-12)
        assert np.all(p[:, mirror_slice(dim)] == 0)
    p = class_prototypes(16)
    np.testing.assert_allclose(p @ p.T, np.eye(NUM_CLASSES), atol=1e-12)


def test_zero_noise_frames_match_class(tmp_path):
    m = generate_synthetic(SyntheticConfig(num_videos=2, frames_per_video=30, noise_sigma=0.0), tmp_path)
    by_class = {}
    for v in m.videos:
        for rec, row in zip(v.frames, m.descriptors[v.video_id]):
            by_class.setdefault(int(rec.expression), []).append(row)
    for rows in by_class.values():
        assert np.all(np.array(rows) == rows[0])


def test_synthetic_deterministic_bytes(tmp_path):
    cfg = SyntheticConfig(num_videos=2, frames_per_video=10, seed=7)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    files_a = sorted((tmp_path / "a").rglob("*.bin"))
    assert files_a
    for fa in files_a:
        fb = tmp_path / "b" / fa.relative_to(tmp_path / "a")
        assert fa.read_bytes() == fb.read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_nearest_prototype_oracle(tmp_path):
    cfg = SyntheticConfig(num_videos=5, frames_per_video=60, class_separation=10, noise_sigma=0.1)
    m = generate_synthetic(cfg, tmp_path)
    protos = class_prototypes(cfg.descriptor_dim) * cfg.class_separation
    correct = total = 0
    for v in m.videos:
        X = m.descriptors[v.video_id]
        for rec, x in zip(v.frames, X):
            nearest = min(range(NUM_CLASSES), key=lambda c: float(np.sum((x - protos[c]) ** 2)))
            correct += nearest == int(rec.expression)
            total += 1
    assert correct / total > 0.99


def test_synthetic_segments_and_va(tmp_path):
    cfg = SyntheticConfig(num_videos=4, frames_per_video=100, min_segment=10, max_segment=20, va_noise=0.0)
    m = generate_synthetic(cfg, tmp_path)
    for v in m.videos:
        labels = [int(r.expression) for r in v.frames]
        runs = np.diff(np.flatnonzero(np.diff(labels)))
        assert np.all(runs >= 10)
        for r in v.frames:
            assert (r.va.valence, r.va.arousal) == VA_PROTOTYPES[r.expression]


def test_va_always_in_range(tmp_path):
    cfg = SyntheticConfig(num_videos=3, frames_per_video=50, va_noise=2.0)
    m = generate_synthetic(cfg, tmp_path)
    vals = np.array([(r.va.valence, r.va.arousal) for r in m.iter_frames()])
    assert np.all(np.abs(vals) <= 1.0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(range(7)), min_size=1, max_size=4, unique=True))
def test_class_subset(classes):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        m = generate_synthetic(SyntheticConfig(num_videos=2, frames_per_video=20, classes=tuple(classes)), d)
    assert {int(r.expression) for r in m.iter_frames()} <= set(classes)
