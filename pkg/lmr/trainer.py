"""
Deterministic training loop with in-batch negatives, checkpointing and the
finite-difference gradient check.

Every source of randomness is derived from (seed, epoch, step), so a run resumed
from a checkpoint continues exactly like the unbroken run.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, field_validator
from tqdm import tqdm

from lmr.checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from lmr.errors import GradCheckFailure, TrainingError
from lmr.evaluator import evaluate, predict
from lmr.feature_io import PathLike
from lmr.model import LMR, Batch, ModelConfig, build_model, collate, flatten_params, named_parameter_slices
from lmr.objectives import Criterion, CriterionOutput, LossBreakdown, LossWeights, normalize_windows
from lmr.synthetic_world import EpisodeBundle, WorldConfig, generate_dataset

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "l1", "giou", "ce", "l_mr", "l_cont", "total"]
EVAL_COLUMNS = ["epoch", "R1@0.5", "R1@0.7", "mAP_avg"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    grad_clip_norm: Optional[float] = None
    eval_every: int = 10
    negatives_per_sample: Optional[int] = None
    progress: bool = False

    @field_validator("learning_rate")
    @classmethod
    def _positive_lr(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"learning_rate must be positive, got {v}")
        return v

    @field_validator("weight_decay")
    @classmethod
    def _non_negative_decay(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"weight_decay must be >= 0, got {v}")
        return v

    @field_validator("batch_size")
    @classmethod
    def _pairs_needed(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"batch_size must be >= 2 for in-batch negatives, got {v}")
        return v

    @field_validator("epochs", "seed")
    @classmethod
    def _non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v

    @field_validator("eval_every")
    @classmethod
    def _positive_interval(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"eval_every must be >= 1, got {v}")
        return v

    @field_validator("grad_clip_norm")
    @classmethod
    def _positive_clip(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not v > 0:
            raise ValueError(f"grad_clip_norm must be positive, got {v}")
        return v

    @field_validator("negatives_per_sample")
    @classmethod
    def _positive_negatives(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 1:
            raise ValueError(f"negatives_per_sample must be >= 1, got {v}")
        return v


@dataclass
class TrainState:
    model: LMR
    optimizer: torch.optim.Optimizer
    train_cfg: TrainConfig
    epoch: int = 0
    loss_history: List[Dict[str, float]] = field(default_factory=list)
    eval_history: List[Dict[str, float]] = field(default_factory=list)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, dtype: torch.dtype = torch.float32) -> TrainState:
    model = build_model(model_cfg, dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    return TrainState(model=model, optimizer=optimizer, train_cfg=train_cfg)


def resume_state(path: PathLike, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    ckpt = load_checkpoint(path)
    state = init_state(model_cfg, train_cfg)
    restore_model(ckpt, state.model)
    restore_optimizer(ckpt, state.model, state.optimizer)
    state.epoch = ckpt.epoch
    state.loss_history = list(ckpt.loss_history)
    state.eval_history = list(ckpt.extra.get("eval_history", []))
    logger.info(f"Resumed from {path} at epoch {state.epoch}")
    return state


def negative_pairs(batch_size: int, limit: Optional[int] = None) -> Tuple[List[int], List[int]]:
    """
    (video index, query index) of every negative pair; the video of sample i is
    paired with the queries of samples i+1, i+2, ... (mod batch size), never its own.
    """
    per_sample = batch_size - 1 if limit is None else min(limit, batch_size - 1)
    videos, queries = [], []
    for i in range(batch_size):
        for offset in range(1, per_sample + 1):
            videos.append(i)
            queries.append((i + offset) % batch_size)
    return videos, queries


def window_mask(bundles: Sequence[EpisodeBundle], length: int) -> torch.Tensor:
    """(B, length) mask of clips overlapping any ground-truth window."""
    mask = torch.zeros(len(bundles), length, dtype=torch.bool)
    for i, bundle in enumerate(bundles):
        seconds = bundle.record.clip_seconds
        for start, end in bundle.record.windows:
            first = int(np.floor(start / seconds))
            last = int(np.ceil(end / seconds))
            mask[i, first : min(last, length)] = True
    return mask


def compute_loss(
    model: LMR,
    batch: Batch,
    bundles: Sequence[EpisodeBundle],
    criterion: Criterion,
    negatives_per_sample: Optional[int] = None,
) -> CriterionOutput:
    """Forward the positives and all negative pairs, and evaluate the criterion."""
    out = model(**batch.inputs())
    dtype = out.moments.dtype
    targets = [normalize_windows(b.record.windows, b.record.duration, dtype) for b in bundles]

    s_neg = s_neg_mask = None
    if len(bundles) > 1 and criterion.weights.cont > 0:
        videos, queries = negative_pairs(len(bundles), negatives_per_sample)
        videos, queries = torch.tensor(videos), torch.tensor(queries)
        encoded, _, _ = model.encode(
            visual=batch.visual[videos],
            context=batch.context[videos],
            query=batch.query[queries],
            visual_mask=batch.visual_mask[videos],
            context_mask=batch.context_mask[videos],
            query_mask=batch.query_mask[queries],
        )
        s_neg, s_neg_mask = encoded.relevance, encoded.relevance_mask

    s_pos_mask = None
    if criterion.weights.positive_saliency:
        s_pos_mask = window_mask(bundles, out.relevance.shape[1]) & out.relevance_mask

    return criterion(
        out.moments,
        out.class_logits,
        targets,
        s_neg=s_neg,
        s_neg_mask=s_neg_mask,
        s_pos=out.relevance,
        s_pos_mask=s_pos_mask,
    )


def train_step(
    state: TrainState, bundles: Sequence[EpisodeBundle], weights: LossWeights, step_seed: int = 0
) -> LossBreakdown:
    """
    One optimizer update on one batch.

    Raises:
        TrainingError: the batch is smaller than two samples or a loss is not finite.
    """
    if len(bundles) < 2:
        raise TrainingError(f"a training batch needs at least 2 episodes for negatives, got {len(bundles)}")
    model = state.model
    model.train()
    dtype = next(model.parameters()).dtype
    batch = collate(bundles, dtype)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(step_seed)
        result = compute_loss(model, batch, bundles, Criterion(weights), state.train_cfg.negatives_per_sample)

    bad = ~torch.isfinite(result.per_sample_mr.detach())
    if bad.any():
        qid = bundles[int(torch.nonzero(bad)[0, 0])].record.qid
        raise TrainingError(f"non-finite moment loss for qid {qid}")
    if not torch.isfinite(result.total.detach()):
        raise TrainingError(f"non-finite total loss in batch starting at qid {bundles[0].record.qid}")

    state.optimizer.zero_grad()
    result.total.backward()
    if state.train_cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm=state.train_cfg.grad_clip_norm)
    state.optimizer.step()
    return result.breakdown


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded shuffle of range(n) cut into batches; a trailing singleton joins the previous batch."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _mean_row(epoch: int, rows: List[LossBreakdown], sizes: List[int]) -> Dict[str, float]:
    total = float(sum(sizes))
    row = {"epoch": epoch}
    for key in LOSS_COLUMNS[1:]:
        row[key] = float(sum(getattr(r, key) * s for r, s in zip(rows, sizes)) / total)
    return row


def _write_histories(state: TrainState, out_dir: Path) -> None:
    pd.DataFrame(state.loss_history, columns=LOSS_COLUMNS).to_csv(out_dir / "loss_history.csv", index=False)
    if state.eval_history:
        pd.DataFrame(state.eval_history, columns=EVAL_COLUMNS).to_csv(out_dir / "eval_history.csv", index=False)


def _checkpoint(state: TrainState, out_dir: Path) -> Path:
    path = out_dir / f"checkpoint_epoch{state.epoch:04d}.lmr"
    extra = {"eval_history": state.eval_history, "train": state.train_cfg.model_dump()}
    for target in (path, out_dir / "last.lmr"):
        save_checkpoint(target, state.model, state.optimizer, state.epoch, state.loss_history, extra)
    _write_histories(state, out_dir)
    logger.info(f"Checkpoint written: {path}")
    return path


def _evaluate_heldout(state: TrainState, heldout: Sequence[EpisodeBundle], batch_size: int) -> Dict[str, float]:
    report = evaluate(predict(state.model, heldout, batch_size=batch_size), [b.record for b in heldout])
    row = {"epoch": state.epoch, **{key: report[key] for key in EVAL_COLUMNS[1:]}}
    logger.info(
        f"Held-out epoch {state.epoch}: R1@0.5={row['R1@0.5']:.2f} R1@0.7={row['R1@0.7']:.2f} "
        f"mAP_avg={row['mAP_avg']:.2f}"
    )
    return row


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    weights: LossWeights,
    dataset: Sequence[EpisodeBundle],
    out_dir: PathLike,
    heldout: Optional[Sequence[EpisodeBundle]] = None,
    resume_from: Optional[PathLike] = None,
) -> TrainState:
    """
    Train for train_cfg.epochs epochs and write checkpoints every eval_every
    epochs and at the end, together with loss_history.csv (and eval_history.csv
    when a held-out split is given).

    Raises:
        TrainingError: the dataset has fewer than two episodes or a loss is not finite.
    """
    if len(dataset) < 2:
        raise TrainingError(f"training needs at least 2 episodes, got {len(dataset)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    state = resume_state(resume_from, model_cfg, train_cfg) if resume_from else init_state(model_cfg, train_cfg)
    if state.epoch == 0:
        _checkpoint(state, out)

    for epoch in range(state.epoch + 1, train_cfg.epochs + 1):
        batches = epoch_batches(len(dataset), train_cfg.batch_size, train_cfg.seed, epoch)
        rows, sizes = [], []
        for step, indices in enumerate(
            tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not train_cfg.progress)
        ):
            bundles = [dataset[i] for i in indices]
            rows.append(train_step(state, bundles, weights, derive_seed(train_cfg.seed, epoch, step)))
            sizes.append(len(bundles))

        state.epoch = epoch
        row = _mean_row(epoch, rows, sizes)
        state.loss_history.append(row)
        logger.info(
            f"Epoch {epoch}/{train_cfg.epochs}: total={row['total']:.4f} l_mr={row['l_mr']:.4f} "
            f"l_cont={row['l_cont']:.4f} l1={row['l1']:.4f} giou={row['giou']:.4f} ce={row['ce']:.4f}"
        )

        if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs:
            if heldout:
                state.eval_history.append(_evaluate_heldout(state, heldout, train_cfg.batch_size))
            _checkpoint(state, out)

    _write_histories(state, out)
    return state


@dataclass
class ProbeResult:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    skipped: bool = False


@dataclass
class GradCheckReport:
    probes: List[ProbeResult]
    tolerance: float

    @property
    def checked(self) -> List[ProbeResult]:
        return [p for p in self.probes if not p.skipped]

    @property
    def skipped(self) -> List[ProbeResult]:
        return [p for p in self.probes if p.skipped]

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.checked), default=float("nan"))

    @property
    def failures(self) -> List[ProbeResult]:
        return [p for p in self.checked if not p.rel_error < self.tolerance]


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    """|a - n| / max(|a|, |n|, floor); gradients below the floor are compared absolutely."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_world(model_cfg: ModelConfig, episodes: int = 2, seed: int = 0) -> List[EpisodeBundle]:
    """Two four-clip episodes sized to model_cfg, used as the gradient-check batch."""
    cfg = WorldConfig(
        seed=seed,
        episodes=episodes,
        heldout_episodes=0,
        clip_count=4,
        visual_dim=model_cfg.visual_dim,
        text_dim=model_cfg.text_dim,
        distractors_per_episode=1,
        segment_len_range=(1, 2),
    )
    return generate_dataset(cfg)


def grad_check(
    model_cfg: ModelConfig,
    probes: int = 200,
    tolerance: float = 1e-4,
    weights: LossWeights = LossWeights(),
    prefix: Optional[str] = None,
    seed: int = 0,
    step: float = 1e-5,
    bundles: Optional[Sequence[EpisodeBundle]] = None,
) -> GradCheckReport:
    """
    Compare the analytic gradient of the total loss with central differences in
    64-bit mode at `probes` randomly chosen scalar parameters.

    Probes whose stencil changes the assignment, an L1 sign or a gIoU branch
    are reported as skipped.

    Raises:
        GradCheckFailure: a probe exceeds tolerance, or no probe could be evaluated.
    """
    cfg = model_cfg.model_copy(update={"dropout": 0.0})
    model = build_model(cfg, torch.float64)
    model.eval()
    bundles = list(bundles) if bundles is not None else tiny_world(cfg, seed=seed)
    batch = collate(bundles, torch.float64)
    criterion = Criterion(weights)

    def evaluate_loss():
        result = compute_loss(model, batch, bundles, criterion)
        return result.total, result.signature

    model.zero_grad()
    total, base_signature = evaluate_loss()
    total.backward()
    params = list(model.parameters())
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])

    slices = named_parameter_slices(model)
    ranges = [np.arange(s.start, s.stop) for name, s, _ in slices if prefix is None or name.startswith(prefix)]
    candidates = np.concatenate(ranges) if ranges else np.array([], dtype=np.int64)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=min(probes, len(candidates)), replace=False) if len(candidates) else []

    vector = flatten_params(model)
    results = []
    with torch.no_grad():
        for index in sorted(int(i) for i in chosen):
            name = next(n for n, s, _ in slices if s.start <= index < s.stop)
            values = []
            signatures = []
            for sign in (1.0, -1.0):
                shifted = vector.clone()
                shifted[index] += sign * step
                torch.nn.utils.vector_to_parameters(shifted, model.parameters())
                loss, signature = evaluate_loss()
                values.append(float(loss))
                signatures.append(signature)
            torch.nn.utils.vector_to_parameters(vector, model.parameters())

            numeric = (values[0] - values[1]) / (2 * step)
            a = float(analytic[index])
            skipped = any(s != base_signature for s in signatures)
            results.append(ProbeResult(name, index, a, numeric, relative_error(a, numeric), skipped))
            logger.debug(f"probe {name}[{index}]: analytic={a:.6e} numeric={numeric:.6e} skipped={skipped}")

    report = GradCheckReport(results, tolerance)
    logger.info(
        f"Gradient check: {len(report.checked)} probes, {len(report.skipped)} skipped, "
        f"max relative error {report.max_rel_error:.3e}"
    )
    if not report.checked:
        raise GradCheckFailure("gradient check evaluated no probe", report.probes)
    if report.failures:
        worst = max(report.failures, key=lambda p: p.rel_error)
        raise GradCheckFailure(
            f"{len(report.failures)} of {len(report.checked)} probes exceed tolerance {tolerance}; "
            f"worst {worst.name}[{worst.index}] rel. error {worst.rel_error:.3e}",
            report.failures,
        )
    return report
