"""
Offline context side: the description-instruction list, prompt batches for an
external description generator, ingestion of the generated descriptions, and
the hash-based text embedder that puts queries and descriptions in one space.
"""

import hashlib
import logging
import string
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from lmr.errors import CoverageError, ValidationError
from lmr.feature_io import (
    DescriptionRecord,
    EpisodeRecord,
    FeatureMatrix,
    PathLike,
    Role,
    write_jsonl,
    write_feature_matrix,
)

logger = logging.getLogger(__name__)

# Verbatim, including the double space in entry 4.
INSTRUCTIONS: Tuple[str, ...] = (
    "Describe the following video concisely.",
    "Present a brief overview of the provided video.",
    "Provide a concise description of the given video.",
    "Convey a short narrative summarizing the provided  video.",
    "Summarize the visual content of the following video.",
    "Deliver a compact portrayal of the presented video.",
    "Furnish a concise explanation of the given video.",
    "Supply a brief account of the provided video.",
    "Narrate the contents of the video with precision.",
    "Offer a succinct analysis of the given video.",
)

_PUNCTUATION_TABLE = str.maketrans("", "", string.punctuation)


class InstructionList(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    instructions: Tuple[str, ...] = INSTRUCTIONS

    @field_validator("instructions")
    @classmethod
    def _exact_list(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        if len(v) != len(INSTRUCTIONS):
            raise ValueError(f"instruction list must have {len(INSTRUCTIONS)} entries, got {len(v)}")
        if tuple(v) != INSTRUCTIONS:
            raise ValueError("instruction list differs from the description-instruction table")
        return tuple(v)

    def __len__(self) -> int:
        return len(self.instructions)

    def __getitem__(self, index: int) -> str:
        return self.instructions[index]


class TextEmbedderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: int = 64
    seed: int = 0
    lowercase: bool = True
    strip_punctuation: bool = True

    @field_validator("dim")
    @classmethod
    def _positive_dim(cls, v: int) -> int:
        if v <= 0:
            raise ValueError(f"dim must be positive, got {v}")
        return v

    @field_validator("seed")
    @classmethod
    def _unsigned_seed(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"seed must be non-negative, got {v}")
        return v


def sample_instruction(rng: np.random.Generator, instructions: InstructionList = InstructionList()) -> Tuple[str, int]:
    index = int(rng.integers(0, len(instructions)))
    return instructions[index], index


def emit_prompt_batch(
    episodes: Sequence[EpisodeRecord],
    path: PathLike,
    instructions: InstructionList = InstructionList(),
    seed: int = 0,
) -> int:
    """
    Write one description request per (vid, clip_index), ordered by vid then clip.

    Returns:
        int: number of lines written.
    """
    clip_counts: Dict[str, int] = {}
    for episode in episodes:
        clip_counts.setdefault(episode.vid, episode.clip_count)

    rng = np.random.default_rng(seed)
    rows = []
    for vid in sorted(clip_counts):
        for clip_index in range(clip_counts[vid]):
            instruction, index = sample_instruction(rng, instructions)
            rows.append(
                {"vid": vid, "clip_index": clip_index, "instruction": instruction, "instruction_index": index}
            )
    write_jsonl(rows, path)
    logger.info(f"Wrote {len(rows)} prompts for {len(clip_counts)} videos to {path}")
    return len(rows)


def token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit vector for a token, from a seeded hash of the token."""
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def tokenize(text: str, cfg: TextEmbedderConfig) -> List[str]:
    if cfg.lowercase:
        text = text.lower()
    if cfg.strip_punctuation:
        text = text.translate(_PUNCTUATION_TABLE)
    return text.split()


def embed_text(text: str, cfg: TextEmbedderConfig) -> np.ndarray:
    """Bag-of-words sentence embedding; empty text gives the zero vector."""
    tokens = tokenize(text, cfg)
    if not tokens:
        return np.zeros(cfg.dim, dtype=np.float32)
    total = np.sum([token_vector(t, cfg.dim, cfg.seed).astype(np.float64) for t in tokens], axis=0)
    norm = np.linalg.norm(total)
    if norm == 0.0:
        return np.zeros(cfg.dim, dtype=np.float32)
    return (total / norm).astype(np.float32)


def embed_query_sequence(text: str, cfg: TextEmbedderConfig) -> FeatureMatrix:
    tokens = tokenize(text, cfg)
    if not tokens:
        raise ValidationError(f"query {text!r} has no tokens")
    return FeatureMatrix(np.stack([token_vector(t, cfg.dim, cfg.seed) for t in tokens]), Role.QUERY)


def embed_descriptions(
    records: Sequence[DescriptionRecord], cfg: TextEmbedderConfig, clip_count: Optional[int] = None
) -> FeatureMatrix:
    """
    Embed one video's clip descriptions into an N^t x dim context matrix.

    Raises:
        CoverageError: a clip index is missing or duplicated.
    """
    if not records:
        raise CoverageError("no description records")
    vids = {r.vid for r in records}
    if len(vids) != 1:
        raise ValidationError(f"descriptions of several videos mixed together: {sorted(vids)}")

    ordered = sorted(records, key=lambda r: r.clip_index)
    indices = [r.clip_index for r in ordered]
    expected = clip_count if clip_count is not None else len(ordered)
    if len(set(indices)) != len(indices):
        dupes = sorted({i for i in indices if indices.count(i) > 1})
        raise CoverageError(f"video {ordered[0].vid}: duplicate clip indices {dupes}")
    if indices != list(range(expected)):
        missing = sorted(set(range(expected)) - set(indices))
        raise CoverageError(f"video {ordered[0].vid}: clip indices do not cover 0..{expected - 1}, missing {missing}")

    return FeatureMatrix(np.stack([embed_text(r.text, cfg) for r in ordered]), Role.CONTEXT_TEXT)


def ingest_descriptions(
    descriptions: Sequence[DescriptionRecord],
    episodes: Sequence[EpisodeRecord],
    cfg: TextEmbedderConfig,
    out_dir: PathLike,
) -> List[Path]:
    """Embed externally generated descriptions and write {vid}.context.fmt1 per video."""
    by_vid = defaultdict(list)
    for record in descriptions:
        by_vid[record.vid].append(record)

    clip_counts: Dict[str, int] = {}
    for episode in episodes:
        clip_counts.setdefault(episode.vid, episode.clip_count)

    written = []
    for vid in sorted(clip_counts):
        if vid not in by_vid:
            raise CoverageError(f"no descriptions for video {vid}")
        matrix = embed_descriptions(by_vid[vid], cfg, clip_counts[vid])
        path = Path(out_dir) / f"{vid}.context.fmt1"
        write_feature_matrix(matrix, path)
        written.append(path)
    logger.info(f"Ingested descriptions for {len(written)} videos into {out_dir}")
    return written
