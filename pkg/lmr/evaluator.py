"""
Moment-retrieval evaluation: R@n at IoU m, mAP over IoU thresholds, the
complex-query (C-QVal) splits, prediction dumps and attention export.

All reported metrics are percentages.
"""

import logging
import string
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
import torch
from pydantic import BaseModel, ConfigDict, field_validator

from lmr.errors import CoverageError, StateError, ValidationError
from lmr.feature_io import EpisodeRecord, FeatureMatrix, PathLike, Role, read_jsonl, write_jsonl
from lmr.model import LMR, ForwardOutput, collate
from lmr.objectives import FOREGROUND

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["R1@0.5", "R1@0.7", "R5@0.5", "R5@0.7", "mAP@0.5", "mAP@0.75", "mAP_avg"]
DEFAULT_THRESHOLDS = tuple(round(float(t), 2) for t in np.linspace(0.5, 0.95, 10))

# (least clause count, least word count) pairs of the complex-query table
DEFAULT_CQVAL_GRID = (
    (1, 8), (1, 9), (1, 10), (1, 11), (1, 12), (1, 13), (1, 14), (1, 15), (1, 16),
    (2, 8), (2, 9), (2, 10),
)

CLAUSE_MARKERS = frozenset(
    {
        "who", "which", "that", "whom", "whose",
        "while", "when", "because", "although", "if", "after", "before", "since", "as", "until",
    }
)
COORDINATORS = frozenset({"and", "but"})
VERB_SUFFIXES = ("s", "ed", "ing")

_PUNCTUATION_TABLE = str.maketrans("", "", string.punctuation)


class CQvalThresholds(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    least_clause_count: int = 1
    least_word_count: int = 1

    @field_validator("least_clause_count", "least_word_count")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"C-QVal thresholds must be >= 1, got {v}")
        return v

    @classmethod
    def parse(cls, text: str) -> "CQvalThresholds":
        """'C,W' as given on the command line."""
        try:
            clauses, words = (int(part) for part in text.split(","))
        except ValueError as e:
            raise ValidationError(f"C-QVal thresholds must look like 'C,W', got {text!r}") from e
        try:
            return cls(least_clause_count=clauses, least_word_count=words)
        except pydantic.ValidationError as e:
            raise ValidationError(f"invalid C-QVal thresholds {text!r}: {e.errors()[0]['msg']}") from e


class EvalOptions(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = 32
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    cqval: Optional[CQvalThresholds] = None
    cqval_grid: Tuple[Tuple[int, int], ...] = DEFAULT_CQVAL_GRID

    @field_validator("batch_size")
    @classmethod
    def _positive_batch(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"batch_size must be >= 1, got {v}")
        return v

    @field_validator("thresholds")
    @classmethod
    def _thresholds_in_range(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v or any(not 0.0 < t <= 1.0 for t in v):
            raise ValueError(f"IoU thresholds must be a non-empty list in (0, 1], got {v}")
        return tuple(v)


@dataclass
class RankedPredictions:
    qid: str
    moments: List[Tuple[float, float, float]]

    def __post_init__(self):
        if not self.moments:
            raise ValidationError(f"{self.qid}: no predicted moments")
        scores = [m[2] for m in self.moments]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError(f"{self.qid}: predictions are not sorted by score")
        for start, end, _ in self.moments:
            if not start <= end:
                raise ValidationError(f"{self.qid}: invalid predicted segment [{start}, {end}]")


def _iou(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """Temporal IoU that scores a zero-length prediction as 0."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def rank_predictions(fwd: ForwardOutput, episode: EpisodeRecord) -> RankedPredictions:
    """
    Convert the k decoder outputs of one sample into segments in seconds, ranked
    by foreground probability; ties keep the lower query index first.
    """
    moments = fwd.moments[0].detach().double().cpu().numpy()
    probs = torch.softmax(fwd.class_logits[0].detach().double(), dim=-1)[:, FOREGROUND].cpu().numpy()
    duration = episode.duration
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    ranked = []
    for i in order:
        center, width = moments[i]
        start = float(np.clip((center - width / 2) * duration, 0.0, duration))
        end = float(np.clip((center + width / 2) * duration, 0.0, duration))
        ranked.append((start, end, float(probs[i])))
    return RankedPredictions(episode.qid, ranked)


def _lookup(predictions: Dict[str, RankedPredictions], qid: str) -> RankedPredictions:
    if qid not in predictions:
        raise CoverageError(f"no predictions for qid {qid}")
    return predictions[qid]


def recall_at_n(
    predictions: Dict[str, RankedPredictions], episodes: Sequence[EpisodeRecord], n: int, iou_threshold: float
) -> float:
    """Percentage of queries with a top-n prediction reaching the IoU threshold on any window."""
    if not episodes:
        return float("nan")
    hits = 0
    for episode in episodes:
        top = _lookup(predictions, episode.qid).moments[:n]
        if any(_iou((s, e), w) >= iou_threshold for s, e, _ in top for w in episode.windows):
            hits += 1
    return 100.0 * hits / len(episodes)


def average_precision(
    predictions: RankedPredictions, gt_windows: Sequence[Tuple[float, float]], iou_threshold: float
) -> float:
    """
    Detection-style AP with greedy matching in score order: each prediction takes
    the unmatched window of highest IoU (first on ties), every window can be
    matched once. Returns a fraction in [0, 1].
    """
    if not gt_windows:
        raise ValidationError(f"{predictions.qid}: average precision needs ground-truth windows")
    matched = [False] * len(gt_windows)
    true_positives = 0
    precision_sum = 0.0
    for rank, (start, end, _) in enumerate(predictions.moments, start=1):
        best, best_iou = None, -1.0
        for j, window in enumerate(gt_windows):
            if matched[j]:
                continue
            iou = _iou((start, end), window)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            matched[best] = True
            true_positives += 1
            precision_sum += true_positives / rank
    return precision_sum / len(gt_windows)


def threshold_key(threshold: float) -> str:
    return f"mAP@{threshold:g}"


def map_over_thresholds(
    predictions: Dict[str, RankedPredictions],
    episodes: Sequence[EpisodeRecord],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
) -> Dict[str, float]:
    thresholds = list(thresholds)
    result = {}
    for t in thresholds:
        if episodes:
            aps = [average_precision(_lookup(predictions, e.qid), e.windows, t) for e in episodes]
            result[threshold_key(t)] = 100.0 * float(np.mean(aps))
        else:
            result[threshold_key(t)] = float("nan")
    result["mAP_avg"] = float(np.mean([result[threshold_key(t)] for t in thresholds]))
    return result


def evaluate(
    predictions: Dict[str, RankedPredictions],
    episodes: Sequence[EpisodeRecord],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
) -> Dict[str, float]:
    """One report row with the REPORT_COLUMNS schema (and any extra mAP@t keys)."""
    row = {
        "R1@0.5": recall_at_n(predictions, episodes, 1, 0.5),
        "R1@0.7": recall_at_n(predictions, episodes, 1, 0.7),
        "R5@0.5": recall_at_n(predictions, episodes, 5, 0.5),
        "R5@0.7": recall_at_n(predictions, episodes, 5, 0.7),
    }
    row.update(map_over_thresholds(predictions, episodes, thresholds))
    for t in (0.5, 0.75):
        if threshold_key(t) not in row:
            row[threshold_key(t)] = map_over_thresholds(predictions, episodes, [t])[threshold_key(t)]
    return row


def predict(
    model: LMR,
    bundles: Sequence,
    batch_size: int = 32,
    ablate_context: bool = False,
    ablate_visual: bool = False,
) -> Dict[str, RankedPredictions]:
    """Batched inference over EpisodeBundles in eval mode."""
    model.eval()
    dtype = next(model.parameters()).dtype
    predictions = {}
    with torch.no_grad():
        for start in range(0, len(bundles), batch_size):
            chunk = bundles[start : start + batch_size]
            batch = collate(chunk, dtype, ablate_context=ablate_context, ablate_visual=ablate_visual)
            out = model(**batch.inputs())
            for i, bundle in enumerate(chunk):
                predictions[bundle.record.qid] = rank_predictions(out.select(i), bundle.record)
    return predictions


def write_report(report: pd.DataFrame, out_dir: PathLike, stem: str = "report") -> Tuple[Path, Path]:
    """Write {stem}.csv and an aligned-text {stem}.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
    report.to_csv(csv_path, index=False, float_format="%.2f")
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(report.to_string(index=False, float_format=lambda v: f"{v:.2f}") + "\n")
    return csv_path, txt_path


def report_frame(row: Dict[str, float]) -> pd.DataFrame:
    return pd.DataFrame([{key: row[key] for key in REPORT_COLUMNS}], columns=REPORT_COLUMNS)


def dump_predictions(predictions: Dict[str, RankedPredictions], path: PathLike) -> None:
    write_jsonl(
        ({"qid": p.qid, "predictions": [list(m) for m in p.moments]} for p in predictions.values()), path
    )


def load_predictions(path: PathLike) -> Dict[str, RankedPredictions]:
    predictions = {}
    for line_number, obj in read_jsonl(path):
        try:
            moments = [(float(s), float(e), float(score)) for s, e, score in obj["predictions"]]
            predictions[str(obj["qid"])] = RankedPredictions(str(obj["qid"]), moments)
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"{path}:{line_number}: invalid prediction record ({e})") from e
    return predictions


def count_words(query: str) -> int:
    return len(query.split())


def _clause_tokens(query: str) -> List[str]:
    tokens = (t.lower().translate(_PUNCTUATION_TABLE) for t in query.split())
    return [t for t in tokens if t]


def count_clauses(query: str) -> int:
    """
    Rule-based clause count: 1 + relative pronouns and subordinators, plus
    and/but followed within three tokens by a verb-like word (-s, -ed, -ing).
    """
    tokens = _clause_tokens(query)
    if not tokens:
        return 0
    count = 1
    for i, token in enumerate(tokens):
        if token in CLAUSE_MARKERS:
            count += 1
        elif token in COORDINATORS and any(t.endswith(VERB_SUFFIXES) for t in tokens[i + 1 : i + 4]):
            count += 1
    return count


def build_cqval_split(episodes: Sequence[EpisodeRecord], thresholds: CQvalThresholds) -> List[EpisodeRecord]:
    return [
        e
        for e in episodes
        if count_clauses(e.query) >= thresholds.least_clause_count
        and count_words(e.query) >= thresholds.least_word_count
    ]


def cqval_sweep(
    predictions: Dict[str, RankedPredictions],
    episodes: Sequence[EpisodeRecord],
    grid: Sequence[Tuple[int, int]] = DEFAULT_CQVAL_GRID,
) -> pd.DataFrame:
    """One report row per (clauses, words) threshold pair, with the split size."""
    rows = []
    for clauses, words in grid:
        split = build_cqval_split(episodes, CQvalThresholds(least_clause_count=clauses, least_word_count=words))
        row = evaluate(predictions, split, DEFAULT_THRESHOLDS)
        rows.append(
            {"clauses": clauses, "words": words, "queries": len(split), **{k: row[k] for k in REPORT_COLUMNS},
             "mAP@0.7": row["mAP@0.7"]}
        )
    return pd.DataFrame(rows, columns=["clauses", "words", "queries"] + REPORT_COLUMNS + ["mAP@0.7"])


def attention_profile(fwd: ForwardOutput) -> pd.DataFrame:
    """
    Per decoder layer and clip, the mean attention mass the moment queries put on
    the clip's context token and visual token.

    Raises:
        StateError: the forward pass did not record attention.
    """
    if fwd.attentions is None or not fwd.attentions.get("decoder"):
        raise StateError("attention was not recorded; run forward with record_attention=True")
    layout = fwd.layout
    clip_mask = fwd.relevance_mask[0].cpu().numpy()
    clips = int(clip_mask.sum())
    rows = []
    for layer, weights in enumerate(fwd.attentions["decoder"]):
        w = weights[0].detach().double().cpu().numpy()
        mean_mass = w.mean(axis=0)
        for clip in range(clips):
            row = {"layer": layer, "clip_index": clip}
            row["context"] = float(mean_mass[layout.context.start + clip]) if layout.context is not None else 0.0
            row["visual"] = float(mean_mass[layout.visual.start + clip]) if layout.visual is not None else 0.0
            rows.append(row)
    return pd.DataFrame(rows, columns=["layer", "clip_index", "context", "visual"])


def export_attention(fwd: ForwardOutput, path: PathLike) -> pd.DataFrame:
    profile = attention_profile(fwd)
    profile.to_csv(path, index=False, float_format="%.8f")
    return profile


def forward_with_attention(model: LMR, bundle, ablate_context: bool = False) -> ForwardOutput:
    model.eval()
    batch = collate([bundle], next(model.parameters()).dtype, ablate_context=ablate_context)
    with torch.no_grad():
        return model(**batch.inputs(), record_attention=True)


def truncate_query(bundle, tokens: int):
    """Copy of a bundle whose query keeps only its first ``tokens`` tokens and their features."""
    if tokens < 1:
        raise ValidationError(f"truncation must keep at least one token, got {tokens}")
    kept = bundle.query_tokens[:tokens]
    return replace(
        bundle,
        query_text=" ".join(kept),
        query_tokens=kept,
        query_features=FeatureMatrix(bundle.query_features.data[: len(kept)], Role.QUERY),
    )
