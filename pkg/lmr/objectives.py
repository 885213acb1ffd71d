"""
Loss terms and target assignment for the moment decoder.

Spans are (center, width) in units of the video duration unless a function says
otherwise; the foreground class is index 0 of the class logits.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.optimize import linear_sum_assignment

from lmr.errors import ValidationError

logger = logging.getLogger(__name__)

FOREGROUND = 0
BACKGROUND = 1

Span = Tuple[float, float]


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    l1: float = 10.0
    giou: float = 1.0
    ce: float = 4.0
    mr: float = 1.0
    cont: float = 1.0
    positive_saliency: bool = False

    @field_validator("l1", "giou", "ce", "mr", "cont")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if not v >= 0:
            raise ValueError(f"loss weights must be >= 0, got {v}")
        return v


@dataclass
class LossBreakdown:
    l1: float
    giou: float
    ce: float
    l_mr: float
    l_cont: float
    total: float
    matched_query_index: Tuple[int, ...] = ()

    def as_row(self) -> Dict[str, float]:
        return {
            "l1": self.l1,
            "giou": self.giou,
            "ce": self.ce,
            "l_mr": self.l_mr,
            "l_cont": self.l_cont,
            "total": self.total,
        }


def _check_span(span: Span) -> None:
    if not span[0] < span[1]:
        raise ValidationError(f"degenerate segment {list(span)}: start must be < end")


def temporal_iou(a: Span, b: Span) -> float:
    _check_span(a)
    _check_span(b)
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def giou_1d(a: Span, b: Span) -> float:
    """Generalized IoU of two intervals, in (-1, 1]."""
    _check_span(a)
    _check_span(b)
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    hull = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union - (hull - union) / hull


def span_cxw_to_xx(spans: torch.Tensor) -> torch.Tensor:
    center, width = spans[..., 0], spans[..., 1]
    return torch.stack([center - 0.5 * width, center + 0.5 * width], dim=-1)


def span_xx_to_cxw(spans: torch.Tensor) -> torch.Tensor:
    start, end = spans[..., 0], spans[..., 1]
    return torch.stack([0.5 * (start + end), end - start], dim=-1)


def pairwise_giou(spans_a: torch.Tensor, spans_b: torch.Tensor) -> torch.Tensor:
    """
    gIoU between every pair of (start, end) spans.

    Args:
        spans_a: (n, 2)
        spans_b: (m, 2)

    Returns:
        torch.Tensor: (n, m)
    """
    a = spans_a[:, None, :]
    b = spans_b[None, :, :]
    inter = (torch.minimum(a[..., 1], b[..., 1]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    hull = torch.maximum(a[..., 1], b[..., 1]) - torch.minimum(a[..., 0], b[..., 0])
    return inter / union - (hull - union) / hull


def matching_cost(
    pred_spans: torch.Tensor, class_logits: torch.Tensor, gt_spans: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    """
    Cost of assigning each of k predictions to each ground-truth window.

    Args:
        pred_spans: (k, 2) normalized (center, width)
        class_logits: (k, 2)
        gt_spans: (g, 2) normalized (center, width)

    Returns:
        torch.Tensor: (k, g)
    """
    center_l1 = torch.abs(pred_spans[:, None, 0] - gt_spans[None, :, 0])
    giou = pairwise_giou(span_cxw_to_xx(pred_spans), span_cxw_to_xx(gt_spans))
    log_fg = F.log_softmax(class_logits, dim=-1)[:, FOREGROUND]
    return weights.l1 * center_l1 + weights.giou * (1 - giou) - weights.ce * log_fg[:, None]


def match_target(
    pred_spans: torch.Tensor, class_logits: torch.Tensor, gt_span: torch.Tensor, weights: LossWeights
) -> int:
    """Index of the cheapest prediction for a single window; ties go to the lowest index."""
    with torch.no_grad():
        cost = matching_cost(pred_spans, class_logits, gt_span.reshape(1, 2), weights)[:, 0]
    return int(np.argmin(cost.cpu().numpy()))


def match_targets(
    pred_spans: torch.Tensor, class_logits: torch.Tensor, gt_spans: torch.Tensor, weights: LossWeights
) -> List[Tuple[int, int]]:
    """
    One-to-one assignment of ground-truth windows to predictions.

    Returns:
        List[Tuple[int, int]]: (query index, window index) pairs, ordered by window.
    """
    if gt_spans.shape[0] == 1:
        return [(match_target(pred_spans, class_logits, gt_spans[0], weights), 0)]
    with torch.no_grad():
        cost = matching_cost(pred_spans, class_logits, gt_spans, weights).cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    return sorted(((int(r), int(c)) for r, c in zip(rows, cols)), key=lambda pair: pair[1])


def combine_moment_terms(l1, giou_loss, ce, weights: LossWeights):
    return weights.l1 * l1 + weights.giou * giou_loss + weights.ce * ce


def moment_loss(
    pred_spans: torch.Tensor,
    class_logits: torch.Tensor,
    gt_spans: torch.Tensor,
    matches: Sequence[Tuple[int, int]],
    weights: LossWeights,
) -> Dict[str, torch.Tensor]:
    """
    Regression and classification loss of one sample.

    l1 covers center and width of every matched pair; ce averages over all k
    queries with foreground for matched queries and background otherwise.
    """
    query_idx = torch.tensor([q for q, _ in matches], dtype=torch.long)
    gt_idx = torch.tensor([g for _, g in matches], dtype=torch.long)
    matched = pred_spans[query_idx]
    target = gt_spans[gt_idx]

    l1 = torch.abs(matched - target).sum(-1).mean()
    giou = torch.diagonal(pairwise_giou(span_cxw_to_xx(matched), span_cxw_to_xx(target)))
    giou_loss = (1 - giou).mean()

    labels = torch.full((class_logits.shape[0],), BACKGROUND, dtype=torch.long)
    labels[query_idx] = FOREGROUND
    ce = F.cross_entropy(class_logits, labels)

    return {"l1": l1, "giou": giou_loss, "ce": ce, "l_mr": combine_moment_terms(l1, giou_loss, ce, weights)}


def contrastive_loss(s_neg: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of -log(1 - sigmoid(s)) over negative pairs and valid clips."""
    # softplus(s) == -log(1 - sigmoid(s)) without the cancellation for large s
    terms = F.softplus(s_neg)
    if mask is None:
        return terms.mean()
    mask = mask.to(terms.dtype)
    return (terms * mask).sum() / mask.sum().clamp(min=1)


def positive_saliency_loss(s_pos: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of -log(sigmoid(s)) over the clips inside ground-truth windows."""
    terms = F.softplus(-s_pos)
    if mask is None:
        return terms.mean()
    mask = mask.to(terms.dtype)
    return (terms * mask).sum() / mask.sum().clamp(min=1)


def total_loss(l_mr, l_cont, weights: LossWeights):
    return weights.mr * l_mr + weights.cont * l_cont


def kink_signature(
    pred_spans: torch.Tensor, gt_spans: torch.Tensor, matches: Sequence[Tuple[int, int]]
) -> Tuple:
    """
    Discrete choices the loss makes at one point: the assignment, the sign of every
    L1 residual and the branch of every min/max inside gIoU. Finite differences
    are only valid between points that share a signature.
    """
    with torch.no_grad():
        signature = [tuple(matches)]
        for q, g in matches:
            p, t = pred_spans[q], gt_spans[g]
            signature.append(tuple(torch.sign(p - t).to(torch.int64).tolist()))
            (ps, pe), (ts, te) = span_cxw_to_xx(p).tolist(), span_cxw_to_xx(t).tolist()
            signature.append((ps > ts, pe < te, min(pe, te) - max(ps, ts) > 0))
    return tuple(signature)


@dataclass
class CriterionOutput:
    total: torch.Tensor
    breakdown: LossBreakdown
    per_sample_mr: torch.Tensor
    signature: Tuple = field(default_factory=tuple)


class Criterion:
    """
    Batch loss: per-sample matching and moment loss, contrastive loss over all
    negative pairs, and the weighted total.
    """

    def __init__(self, weights: LossWeights):
        self.weights = weights

    def __call__(
        self,
        pred_spans: torch.Tensor,
        class_logits: torch.Tensor,
        targets: Sequence[torch.Tensor],
        s_neg: Optional[torch.Tensor] = None,
        s_neg_mask: Optional[torch.Tensor] = None,
        s_pos: Optional[torch.Tensor] = None,
        s_pos_mask: Optional[torch.Tensor] = None,
    ) -> CriterionOutput:
        """
        Args:
            pred_spans: (B, k, 2) normalized (center, width)
            class_logits: (B, k, 2)
            targets: per sample a (g, 2) tensor of normalized (center, width) windows
            s_neg: (P, N) relevance scores of negative video-query pairs
            s_neg_mask: (P, N) valid clips of s_neg
            s_pos: (B, N) relevance scores of the positive pairs, used with positive_saliency
            s_pos_mask: (B, N) clips inside ground-truth windows
        """
        terms = {"l1": [], "giou": [], "ce": [], "l_mr": []}
        matched = []
        signature = []
        for i, gt in enumerate(targets):
            matches = match_targets(pred_spans[i], class_logits[i], gt, self.weights)
            sample = moment_loss(pred_spans[i], class_logits[i], gt, matches, self.weights)
            for key in terms:
                terms[key].append(sample[key])
            matched.append(matches[0][0])
            signature.append(kink_signature(pred_spans[i], gt, matches))

        stacked = {key: torch.stack(values) for key, values in terms.items()}
        l_mr = stacked["l_mr"].mean()

        l_cont = pred_spans.new_zeros(())
        if s_neg is not None and s_neg.numel() > 0:
            l_cont = l_cont + contrastive_loss(s_neg, s_neg_mask)
        if self.weights.positive_saliency and s_pos is not None:
            l_cont = l_cont + positive_saliency_loss(s_pos, s_pos_mask)

        total = total_loss(l_mr, l_cont, self.weights)
        breakdown = LossBreakdown(
            l1=stacked["l1"].mean().detach().item(),
            giou=stacked["giou"].mean().detach().item(),
            ce=stacked["ce"].mean().detach().item(),
            l_mr=l_mr.detach().item(),
            l_cont=l_cont.detach().item(),
            total=total.detach().item(),
            matched_query_index=tuple(matched),
        )
        return CriterionOutput(total=total, breakdown=breakdown, per_sample_mr=stacked["l_mr"], signature=tuple(signature))


def normalize_windows(windows: Sequence[Span], duration: float, dtype=torch.float32) -> torch.Tensor:
    """Windows in seconds to a (g, 2) tensor of normalized (center, width)."""
    if not windows:
        raise ValidationError("training episodes need at least one ground-truth window")
    xx = torch.tensor([[s / duration, e / duration] for s, e in windows], dtype=dtype)
    return span_xx_to_cxw(xx)
