"""
Toy episodes where the target moment is visually identical to its distractors.

Every episode holds one target segment and a few distractor segments that share
the same action. With context_only episodes the background only shows up in the
context (description) features, so the query can only be resolved by reading
the context stream.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from lmr.context_pipeline import (
    InstructionList,
    TextEmbedderConfig,
    embed_query_sequence,
    sample_instruction,
    token_vector,
    tokenize,
)
from lmr.errors import ConfigError, CoverageError
from lmr.feature_io import (
    DescriptionRecord,
    EpisodeRecord,
    FeatureMatrix,
    PathLike,
    Role,
    load_manifest,
    read_feature_matrix,
    write_descriptions,
    write_feature_matrix,
    write_manifest,
)

logger = logging.getLogger(__name__)

DATASET_META = "dataset.json"
TRAIN_MANIFEST = "manifest.jsonl"
HELDOUT_MANIFEST = "heldout.jsonl"


class AttributeVocab(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    actions: int = 20
    backgrounds: int = 20
    appearances: int = 20

    @field_validator("actions", "backgrounds", "appearances")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"vocabulary sizes must be positive, got {v}")
        return v


class WorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    episodes: int = 2000
    heldout_episodes: int = 200
    clip_count: int = 40
    clip_seconds: float = 2.0
    visual_dim: int = 64
    text_dim: int = 64
    vocab: AttributeVocab = AttributeVocab()
    distractors_per_episode: int = 2
    segment_len_range: Tuple[int, int] = (3, 10)
    noise_sigma: float = 0.1
    context_only_fraction: float = 1.0
    embed_seed: int = 0

    @field_validator("seed", "embed_seed")
    @classmethod
    def _unsigned(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"seeds must be non-negative, got {v}")
        return v

    @field_validator("episodes", "clip_count", "visual_dim", "text_dim")
    @classmethod
    def _positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"counts must be positive, got {v}")
        return v

    @field_validator("heldout_episodes", "distractors_per_episode")
    @classmethod
    def _non_negative_count(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"counts must be non-negative, got {v}")
        return v

    @field_validator("clip_seconds")
    @classmethod
    def _positive_seconds(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"clip_seconds must be positive, got {v}")
        return v

    @field_validator("noise_sigma")
    @classmethod
    def _non_negative_noise(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {v}")
        return v

    @field_validator("context_only_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"context_only_fraction must be in [0, 1], got {v}")
        return v

    @model_validator(mode="after")
    def _segments_fit(self) -> "WorldConfig":
        lo, hi = self.segment_len_range
        if lo < 1 or hi < lo:
            raise ValueError(f"segment_len_range must satisfy 1 <= min <= max, got {self.segment_len_range}")
        segments = self.distractors_per_episode + 1
        if segments * hi > self.clip_count:
            raise ValueError(
                f"{segments} segments of up to {hi} clips do not fit into {self.clip_count} clips"
            )
        if self.vocab.backgrounds < segments or self.vocab.appearances < segments:
            raise ValueError(f"need at least {segments} backgrounds and appearances for distinct segments")
        return self

    @property
    def text_embedder(self) -> TextEmbedderConfig:
        return TextEmbedderConfig(dim=self.text_dim, seed=self.embed_seed)


@dataclass
class EpisodeBundle:
    record: EpisodeRecord
    visual: FeatureMatrix
    context: FeatureMatrix
    query_text: str
    query_tokens: List[str]
    query_features: FeatureMatrix
    descriptions: List[DescriptionRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.visual.rows != self.context.rows:
            raise CoverageError(
                f"{self.record.qid}: {self.visual.rows} visual rows but {self.context.rows} context rows"
            )


def attribute_token(kind: str, attribute_id: int) -> str:
    return f"{kind}{attribute_id}"


IDLE_TOKEN = attribute_token("idle", 0)


def embed_attribute(kind: str, attribute_id: int, dim: int, seed: int) -> np.ndarray:
    """Unit vector of one latent attribute; shares the token space of the text embedder."""
    return token_vector(attribute_token(kind, attribute_id), dim, seed)


def _place_segments(rng: np.random.Generator, cfg: WorldConfig) -> List[Tuple[int, int]]:
    n_segments = cfg.distractors_per_episode + 1
    lo, hi = cfg.segment_len_range
    lengths = rng.integers(lo, hi + 1, size=n_segments)
    free = cfg.clip_count - int(lengths.sum())
    if free < 0:
        raise ConfigError(f"segments of total length {lengths.sum()} cannot be placed in {cfg.clip_count} clips")

    cuts = np.sort(rng.integers(0, free + 1, size=n_segments))
    gaps = np.diff(np.concatenate([[0], cuts]))
    segments = []
    cursor = 0
    for gap, length in zip(gaps, lengths):
        start = cursor + int(gap)
        segments.append((start, start + int(length)))
        cursor = start + int(length)
    return segments


def generate_episode(cfg: WorldConfig, index: int, noise_seed: Optional[int] = None) -> EpisodeBundle:
    """
    Generate one episode. Layout, noise and instruction sampling use separate
    generators derived from (seed, index); noise_seed redraws only the noise.
    """
    layout_rng = np.random.default_rng([cfg.seed, index, 0])
    noise_key = [cfg.seed, index, 1] if noise_seed is None else [cfg.seed, index, 1, noise_seed]
    noise_rng = np.random.default_rng(noise_key)
    prompt_rng = np.random.default_rng([cfg.seed, index, 2])

    n_segments = cfg.distractors_per_episode + 1
    segments = _place_segments(layout_rng, cfg)
    target = int(layout_rng.integers(n_segments))
    action = int(layout_rng.integers(cfg.vocab.actions))
    backgrounds = [int(b) for b in layout_rng.choice(cfg.vocab.backgrounds, n_segments, replace=False)]
    appearances = [int(a) for a in layout_rng.choice(cfg.vocab.appearances, n_segments, replace=False)]
    context_only = bool(layout_rng.random() < cfg.context_only_fraction)

    visual_seed = cfg.embed_seed + 1
    text_seed = cfg.embed_seed

    visual = np.tile(embed_attribute("idle", 0, cfg.visual_dim, visual_seed), (cfg.clip_count, 1)).astype(np.float64)
    context = np.tile(embed_attribute("idle", 0, cfg.text_dim, text_seed), (cfg.clip_count, 1)).astype(np.float64)
    texts = [IDLE_TOKEN] * cfg.clip_count

    action_v = embed_attribute("action", action, cfg.visual_dim, visual_seed)
    action_t = embed_attribute("action", action, cfg.text_dim, text_seed)
    for (start, end), background, appearance in zip(segments, backgrounds, appearances):
        visual_row = action_v.astype(np.float64)
        if not context_only:
            visual_row = visual_row + embed_attribute("background", background, cfg.visual_dim, visual_seed)
        context_row = (
            action_t.astype(np.float64)
            + embed_attribute("background", background, cfg.text_dim, text_seed)
            + embed_attribute("appearance", appearance, cfg.text_dim, text_seed)
        )
        visual[start:end] = visual_row
        context[start:end] = context_row
        description = " ".join(
            [
                attribute_token("action", action),
                attribute_token("background", background),
                attribute_token("appearance", appearance),
            ]
        )
        texts[start:end] = [description] * (end - start)

    visual += noise_rng.normal(0.0, cfg.noise_sigma, size=visual.shape)
    context += noise_rng.normal(0.0, cfg.noise_sigma, size=context.shape)

    query_text = (
        f"{attribute_token('action', action)} at {attribute_token('background', backgrounds[target])} "
        f"with {attribute_token('appearance', appearances[target])}"
    )
    start, end = segments[target]
    vid = f"syn{index:06d}"
    record = EpisodeRecord(
        vid=vid,
        qid=f"q{index:06d}",
        query=query_text,
        clip_count=cfg.clip_count,
        clip_seconds=cfg.clip_seconds,
        windows=[(start * cfg.clip_seconds, end * cfg.clip_seconds)],
        attributes={
            "action": action,
            "backgrounds": backgrounds,
            "appearances": appearances,
            "segments": [list(s) for s in segments],
            "target": target,
            "context_only": context_only,
        },
    )

    instructions = InstructionList()
    descriptions = []
    for clip_index, text in enumerate(texts):
        _, instruction_index = sample_instruction(prompt_rng, instructions)
        descriptions.append(
            DescriptionRecord(vid=vid, clip_index=clip_index, text=text, instruction_index=instruction_index)
        )

    embedder = cfg.text_embedder
    return EpisodeBundle(
        record=record,
        visual=FeatureMatrix(visual, Role.VISUAL),
        context=FeatureMatrix(context, Role.CONTEXT_TEXT),
        query_text=query_text,
        query_tokens=tokenize(query_text, embedder),
        query_features=embed_query_sequence(query_text, embedder),
        descriptions=descriptions,
    )


def generate_dataset(
    cfg: WorldConfig, start: int = 0, count: Optional[int] = None, n_jobs: int = 1
) -> List[EpisodeBundle]:
    """Generate episodes start..start+count-1; parallel and serial runs agree exactly."""
    count = cfg.episodes if count is None else count
    indices = range(start, start + count)
    if n_jobs == 1:
        return [generate_episode(cfg, i) for i in indices]
    return Parallel(n_jobs=n_jobs)(delayed(generate_episode)(cfg, i) for i in indices)


def generate_heldout(cfg: WorldConfig, n_jobs: int = 1) -> List[EpisodeBundle]:
    return generate_dataset(cfg, start=cfg.episodes, count=cfg.heldout_episodes, n_jobs=n_jobs)


def descriptions_name(manifest_name: str) -> str:
    """descriptions.jsonl for the training manifest, {stem}_descriptions.jsonl otherwise."""
    if manifest_name == TRAIN_MANIFEST:
        return "descriptions.jsonl"
    return f"{Path(manifest_name).stem}_descriptions.jsonl"


def write_dataset(bundles: List[EpisodeBundle], out_dir: PathLike, manifest_name: str = TRAIN_MANIFEST) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for bundle in bundles:
        write_feature_matrix(bundle.visual, out / f"{bundle.record.vid}.visual.fmt1")
        write_feature_matrix(bundle.context, out / f"{bundle.record.vid}.context.fmt1")
    manifest_path = out / manifest_name
    write_manifest([b.record for b in bundles], manifest_path)
    descriptions = [d for b in bundles for d in b.descriptions]
    if descriptions:
        write_descriptions(descriptions, out / descriptions_name(manifest_name))
    return manifest_path


def write_world(cfg: WorldConfig, out_dir: PathLike, n_jobs: int = 1) -> Dict[str, int]:
    """Generate and write the training and held-out splits plus dataset.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = generate_dataset(cfg, n_jobs=n_jobs)
    write_dataset(train, out, TRAIN_MANIFEST)
    heldout = generate_heldout(cfg, n_jobs=n_jobs) if cfg.heldout_episodes else []
    if heldout:
        write_dataset(heldout, out, HELDOUT_MANIFEST)

    meta = {
        "clip_seconds": cfg.clip_seconds,
        "text_embedder": cfg.text_embedder.model_dump(),
        "world": cfg.model_dump(mode="json"),
    }
    with open(out / DATASET_META, "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)

    summary = {
        "episodes": len(train),
        "heldout_episodes": len(heldout),
        "clips": sum(b.record.clip_count for b in train + heldout),
        "windows": sum(len(b.record.windows) for b in train + heldout),
    }
    logger.info(f"Wrote synthetic world to {out}: {summary}")
    return summary


def read_dataset(
    data_dir: PathLike,
    manifest_name: str = TRAIN_MANIFEST,
    embedder: Optional[TextEmbedderConfig] = None,
    clip_seconds: Optional[float] = None,
) -> List[EpisodeBundle]:
    """
    Load bundles from {data_dir}/{manifest_name} and its FMT1 feature files.

    The text embedder and clip duration come from dataset.json when present;
    otherwise the embedder dimension follows the context features.
    """
    root = Path(data_dir)
    meta_path = root / DATASET_META
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        embedder = embedder or TextEmbedderConfig(**meta["text_embedder"])
        clip_seconds = clip_seconds or meta["clip_seconds"]

    records = load_manifest(root / manifest_name, clip_seconds=clip_seconds or 2.0)
    bundles = []
    for record in records:
        visual = read_feature_matrix(root / f"{record.vid}.visual.fmt1", Role.VISUAL)
        context = read_feature_matrix(root / f"{record.vid}.context.fmt1", Role.CONTEXT_TEXT)
        if visual.rows != record.clip_count:
            raise CoverageError(f"{record.vid}: {visual.rows} visual rows but manifest implies {record.clip_count} clips")
        query_embedder = embedder or TextEmbedderConfig(dim=context.cols)
        bundles.append(
            EpisodeBundle(
                record=record,
                visual=visual,
                context=context,
                query_text=record.query,
                query_tokens=tokenize(record.query, query_embedder),
                query_features=embed_query_sequence(record.query, query_embedder),
            )
        )
    logger.info(f"Loaded {len(bundles)} episodes from {root / manifest_name}")
    return bundles
