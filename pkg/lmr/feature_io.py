"""
On-disk data model: FMT1 binary feature matrices and JSONL manifests.

FMT1 layout (little-endian throughout):
    bytes 0-3   magic "FMT1"
    bytes 4-7   rows, unsigned 32-bit
    bytes 8-11  cols, unsigned 32-bit
    then rows * cols 32-bit floats, row-major
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from lmr.errors import DuplicationError, FeatureWriteError, FormatError, TruncationError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"FMT1"
HEADER_BYTES = 12
DEFAULT_CLIP_SECONDS = 2.0

PathLike = Union[str, Path]


class Role(Enum):
    VISUAL = "visual"
    CONTEXT_TEXT = "context_text"
    QUERY = "query"


class FeatureMatrix:
    """A rows x cols float32 matrix tagged with the stream it belongs to."""

    def __init__(self, data: np.ndarray, role: Role = Role.VISUAL):
        data = np.asarray(data)
        if data.ndim != 2:
            raise ValidationError(f"FeatureMatrix needs a 2-D array, got shape {data.shape}")
        rows, cols = data.shape
        if rows < 1 or cols < 1:
            raise ValidationError(f"FeatureMatrix needs rows >= 1 and cols > 0, got {rows}x{cols}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(data).all():
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValidationError(f"Non-finite element at row {bad[0]}, col {bad[1]}")
        self.data = data
        self.role = Role(role)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self) -> str:
        return f"FeatureMatrix({self.rows}x{self.cols}, role={self.role.value})"


def write_feature_matrix(m: FeatureMatrix, path: PathLike) -> None:
    header = MAGIC + np.array([m.rows, m.cols], dtype="<u4").tobytes()
    payload = m.data.astype("<f4", copy=False).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise FeatureWriteError(path, e) from e


def read_feature_matrix(path: PathLike, role: Role = Role.VISUAL) -> FeatureMatrix:
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < HEADER_BYTES:
        raise TruncationError(f"{path}: file of {len(raw)} bytes is shorter than the FMT1 header")

    rows, cols = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=4))
    expected = HEADER_BYTES + 4 * rows * cols
    if len(raw) != expected:
        raise TruncationError(
            f"{path}: header declares {rows}x{cols} ({expected} bytes) but file has {len(raw)} bytes"
        )

    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES).reshape(rows, cols)
    try:
        return FeatureMatrix(data.astype(np.float32), role)
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from e


class EpisodeRecord(BaseModel):
    """One (video, query) manifest entry with its ground-truth windows."""

    model_config = ConfigDict(extra="forbid")

    vid: str
    qid: str
    query: str
    clip_count: int
    clip_seconds: float = DEFAULT_CLIP_SECONDS
    windows: List[Tuple[float, float]] = []
    duration: Optional[float] = None
    attributes: Optional[Dict[str, Any]] = None

    @field_validator("vid", "qid")
    @classmethod
    def _non_empty_id(cls, v: str) -> str:
        if not v:
            raise ValueError("ids must be non-empty")
        return v

    @field_validator("clip_count")
    @classmethod
    def _positive_clips(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"clip_count must be >= 1, got {v}")
        return v

    @field_validator("clip_seconds")
    @classmethod
    def _positive_seconds(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"clip_seconds must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _windows_inside_video(self) -> "EpisodeRecord":
        if self.duration is None:
            self.duration = self.clip_count * self.clip_seconds
        for start, end in self.windows:
            if not (0.0 <= start < end <= self.duration + 1e-9):
                raise ValueError(
                    f"window [{start}, {end}] of qid {self.qid} is outside [0, {self.duration}] or empty"
                )
        return self


class DescriptionRecord(BaseModel):
    """One externally generated description of one clip."""

    model_config = ConfigDict(extra="forbid")

    vid: str
    clip_index: int
    text: str
    instruction_index: int

    @field_validator("clip_index", "instruction_index")
    @classmethod
    def _non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"index must be non-negative, got {v}")
        return v


def read_jsonl(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield line_number, json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_number}: malformed JSON ({e.msg})") from e


def write_jsonl(rows, path: PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as e:
        raise FeatureWriteError(path, e) from e


def _seconds(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected a number of seconds, got {value!r}")
    return float(value)


def load_manifest(path: PathLike, clip_seconds: float = DEFAULT_CLIP_SECONDS) -> List[EpisodeRecord]:
    """
    Load a QVHighlights-shaped JSONL manifest.

    Args:
        path: JSONL file with keys qid, query, vid, duration, relevant_windows.
        clip_seconds: duration of one clip; duration / clip_seconds is rounded to clip_count.

    Returns:
        List[EpisodeRecord]: records in file order.

    Raises:
        FormatError: a line is not a JSON object with the required keys.
        ValidationError: a window falls outside [0, duration].
        DuplicationError: a qid appears twice.
    """
    records: List[EpisodeRecord] = []
    seen = set()
    for line_number, obj in read_jsonl(path):
        if not isinstance(obj, dict):
            raise FormatError(f"{path}:{line_number}: expected a JSON object")
        missing = [k for k in ("qid", "query", "vid", "duration") if k not in obj]
        if missing:
            raise FormatError(f"{path}:{line_number}: missing keys {missing}")

        qid = str(obj["qid"])
        try:
            duration = _seconds(obj["duration"])
            windows = [(_seconds(start), _seconds(end)) for start, end in (obj.get("relevant_windows") or [])]
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}:{line_number}: qid {qid}: malformed duration or relevant_windows ({e})") from e
        for window in windows:
            if not (0.0 <= window[0] < window[1] <= duration):
                raise ValidationError(
                    f"{path}:{line_number}: window {list(window)} of qid {qid} is outside [0, {duration}]"
                )
        if qid in seen:
            raise DuplicationError(f"{path}:{line_number}: duplicate qid {qid}")
        seen.add(qid)

        try:
            record = EpisodeRecord(
                vid=str(obj["vid"]),
                qid=qid,
                query=str(obj["query"]),
                clip_count=clip_count_for(duration, clip_seconds),
                clip_seconds=clip_seconds,
                windows=windows,
                duration=duration,
                attributes=obj.get("attributes"),
            )
        except pydantic.ValidationError as e:
            raise ValidationError(f"{path}:{line_number}: qid {qid}: {e.errors()[0]['msg']}") from e
        records.append(record)

    logger.debug(f"Loaded {len(records)} episodes from {path}")
    return records


def write_manifest(records: List[EpisodeRecord], path: PathLike) -> None:
    rows = []
    for r in records:
        row = {
            "qid": r.qid,
            "query": r.query,
            "vid": r.vid,
            "duration": r.duration,
            "relevant_windows": [list(w) for w in r.windows],
        }
        if r.attributes is not None:
            row["attributes"] = r.attributes
        rows.append(row)
    write_jsonl(rows, path)


def load_descriptions(path: PathLike) -> List[DescriptionRecord]:
    records = []
    for line_number, obj in read_jsonl(path):
        try:
            records.append(DescriptionRecord(**obj))
        except (pydantic.ValidationError, TypeError) as e:
            raise FormatError(f"{path}:{line_number}: invalid description record ({e})") from e
    return records


def write_descriptions(records: List[DescriptionRecord], path: PathLike) -> None:
    write_jsonl((r.model_dump() for r in records), path)


def clip_count_for(duration: float, clip_seconds: float = DEFAULT_CLIP_SECONDS) -> int:
    return max(1, int(math.floor(duration / clip_seconds + 0.5)))
