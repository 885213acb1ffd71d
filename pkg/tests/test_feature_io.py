"""
Tests for the FMT1 codec and the JSONL manifest loader
"""

import json
import struct

import numpy as np
import pydantic
import pytest

from lmr.errors import DuplicationError, FormatError, TruncationError, ValidationError
from lmr.feature_io import (
    DescriptionRecord,
    EpisodeRecord,
    FeatureMatrix,
    Role,
    clip_count_for,
    load_descriptions,
    load_manifest,
    read_feature_matrix,
    write_descriptions,
    write_feature_matrix,
    write_manifest,
)


def _write_lines(path, objs):
    with open(path, "w", encoding="utf-8") as f:
        for obj in objs:
            f.write((obj if isinstance(obj, str) else json.dumps(obj)) + "\n")


def test_header_bytes_and_length(tmp_path):
    path = tmp_path / "m.fmt1"
    write_feature_matrix(FeatureMatrix(np.arange(12, dtype=np.float32).reshape(3, 4)), path)
    raw = path.read_bytes()
    assert len(raw) == 60
    assert raw[:12] == bytes([0x46, 0x4D, 0x54, 0x31, 3, 0, 0, 0, 4, 0, 0, 0])


def test_zero_payload(tmp_path):
    path = tmp_path / "z.fmt1"
    write_feature_matrix(FeatureMatrix(np.zeros((1, 1))), path)
    assert path.read_bytes()[12:] == b"\x00\x00\x00\x00"


def test_roundtrip_random_matrices(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "r.fmt1"
    for _ in range(1000):
        rows, cols = rng.integers(1, 9, size=2)
        data = (rng.standard_normal((rows, cols)) * 10.0 ** rng.integers(-30, 30)).astype(np.float32)
        m = FeatureMatrix(data, Role.CONTEXT_TEXT)
        write_feature_matrix(m, path)
        back = read_feature_matrix(path, Role.CONTEXT_TEXT)
        assert back == m
        assert back.data.tobytes() == data.tobytes()


def test_roundtrip_keeps_negative_zero(tmp_path):
    path = tmp_path / "nz.fmt1"
    m = FeatureMatrix(np.array([[-0.0, 0.0]], dtype=np.float32))
    write_feature_matrix(m, path)
    assert read_feature_matrix(path).data.tobytes() == m.data.tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.fmt1"
    path.write_bytes(b"XXXX" + struct.pack("<II", 1, 1) + struct.pack("<f", 1.0))
    with pytest.raises(FormatError):
        read_feature_matrix(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.fmt1"
    path.write_bytes(b"FMT1" + struct.pack("<II", 10, 10) + np.zeros(50, dtype="<f4").tobytes())
    with pytest.raises(TruncationError):
        read_feature_matrix(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "header.fmt1"
    path.write_bytes(b"FMT1\x01\x00")
    with pytest.raises(TruncationError):
        read_feature_matrix(path)


def test_non_finite_element_rejected_on_read(tmp_path):
    path = tmp_path / "nan.fmt1"
    path.write_bytes(b"FMT1" + struct.pack("<II", 1, 2) + np.array([1.0, np.nan], dtype="<f4").tobytes())
    with pytest.raises(ValidationError):
        read_feature_matrix(path)


@pytest.mark.parametrize("data", [np.zeros((0, 3)), np.zeros((2, 0)), np.zeros(3), np.array([[np.inf]])])
def test_invalid_matrices(data):
    with pytest.raises(ValidationError):
        FeatureMatrix(data)


def test_load_manifest_clip_count(tmp_path):
    path = tmp_path / "m.jsonl"
    _write_lines(
        path,
        [{"qid": "q1", "vid": "v1", "query": "a cat", "duration": 150.0, "relevant_windows": [[10.0, 24.0]]}],
    )
    (record,) = load_manifest(path, clip_seconds=2.0)
    assert record.clip_count == 75
    assert record.windows == [(10.0, 24.0)]
    assert record.duration == 150.0


def test_load_manifest_window_outside(tmp_path):
    path = tmp_path / "m.jsonl"
    _write_lines(
        path,
        [{"qid": "q7", "vid": "v1", "query": "a cat", "duration": 150.0, "relevant_windows": [[140.0, 160.0]]}],
    )
    with pytest.raises(ValidationError, match="q7"):
        load_manifest(path)


def test_load_manifest_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_manifest(path) == []


def test_load_manifest_duplicate_qid(tmp_path):
    path = tmp_path / "dup.jsonl"
    row = {"qid": "q1", "vid": "v1", "query": "x", "duration": 10.0, "relevant_windows": [[0.0, 2.0]]}
    _write_lines(path, [row, dict(row, vid="v2")])
    with pytest.raises(DuplicationError, match=":2"):
        load_manifest(path)


def test_load_manifest_malformed_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    row = {"qid": "q1", "vid": "v1", "query": "x", "duration": 10.0, "relevant_windows": [[0.0, 2.0]]}
    _write_lines(path, [row, "{not json"])
    with pytest.raises(FormatError, match=":2"):
        load_manifest(path)


def test_load_manifest_missing_keys(tmp_path):
    path = tmp_path / "keys.jsonl"
    _write_lines(path, [{"qid": "q1", "query": "x"}])
    with pytest.raises(FormatError, match="missing keys"):
        load_manifest(path)


@pytest.mark.parametrize(
    "field, value",
    [
        ("relevant_windows", [["a", 5.0]]),
        ("relevant_windows", [[1.0, "5"]]),
        ("relevant_windows", [3.0]),
        ("relevant_windows", [[1.0, 2.0, 3.0]]),
        ("duration", "long"),
        ("duration", None),
    ],
)
def test_load_manifest_malformed_values(tmp_path, field, value):
    path = tmp_path / "values.jsonl"
    row = {"qid": "q1", "vid": "v1", "query": "x", "duration": 10.0, "relevant_windows": [[0.0, 2.0]]}
    _write_lines(path, [row, dict(row, qid="q2", **{field: value})])
    with pytest.raises(FormatError, match=r":2: qid q2"):
        load_manifest(path)


def test_manifest_roundtrip_preserves_order(tmp_path):
    records = [
        EpisodeRecord(vid=f"v{i}", qid=f"q{9 - i}", query="walk", clip_count=5, windows=[(0.0, 2.0 * (i % 4 + 1))])
        for i in range(6)
    ]
    path = tmp_path / "m.jsonl"
    write_manifest(records, path)
    first = load_manifest(path)
    assert [r.qid for r in first] == [r.qid for r in records]
    assert [r.windows for r in first] == [r.windows for r in records]
    write_manifest(first, path)
    assert load_manifest(path) == first


def test_episode_record_duration_defaults_to_clips():
    record = EpisodeRecord(vid="v", qid="q", query="x", clip_count=4, clip_seconds=2.5)
    assert record.duration == 10.0


def test_episode_record_rejects_empty_id():
    with pytest.raises(pydantic.ValidationError):
        EpisodeRecord(vid="", qid="q", query="x", clip_count=1)


def test_clip_count_rounding():
    assert clip_count_for(150.0, 2.0) == 75
    assert clip_count_for(151.0, 2.0) == 76
    assert clip_count_for(0.5, 2.0) == 1


def test_descriptions_roundtrip(tmp_path):
    records = [DescriptionRecord(vid="v1", clip_index=i, text=f"clip {i}", instruction_index=i % 10) for i in range(3)]
    path = tmp_path / "d.jsonl"
    write_descriptions(records, path)
    assert load_descriptions(path) == records


def test_descriptions_invalid_record(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_lines(path, [{"vid": "v1", "clip_index": -1, "text": "x", "instruction_index": 0}])
    with pytest.raises(FormatError, match=":1"):
        load_descriptions(path)
