"""
Tests for interval IoU, target assignment and every loss term
"""

import itertools
import math
import warnings

import numpy as np
import pydantic
import pytest
import torch

from lmr.errors import ValidationError
from lmr.objectives import (
    BACKGROUND,
    FOREGROUND,
    Criterion,
    LossWeights,
    combine_moment_terms,
    contrastive_loss,
    giou_1d,
    kink_signature,
    match_target,
    match_targets,
    moment_loss,
    normalize_windows,
    pairwise_giou,
    positive_saliency_loss,
    span_cxw_to_xx,
    span_xx_to_cxw,
    temporal_iou,
    total_loss,
)

DEFAULT_WEIGHTS = LossWeights()


def _logits(p_fg):
    """Two-class logits whose softmax gives p_fg on the foreground class."""
    p = torch.as_tensor(p_fg, dtype=torch.float64)
    logits = torch.zeros(p.shape + (2,), dtype=torch.float64)
    logits[..., FOREGROUND] = torch.log(p)
    logits[..., BACKGROUND] = torch.log1p(-p)
    return logits


def _random_segment(rng):
    a, b = sorted(rng.uniform(0, 10, size=2))
    return (float(a), float(b + 1e-3))


def test_temporal_iou_examples():
    assert temporal_iou((0, 10), (0, 10)) == 1.0
    assert temporal_iou((0, 10), (10, 20)) == 0.0
    assert temporal_iou((0, 10), (5, 15)) == pytest.approx(1 / 3)


@pytest.mark.parametrize("bad", [(5, 5), (6, 2)])
def test_degenerate_segments(bad):
    with pytest.raises(ValidationError):
        temporal_iou(bad, (0, 1))
    with pytest.raises(ValidationError):
        giou_1d((0, 1), bad)


def test_giou_examples():
    assert giou_1d((2, 7), (2, 7)) == 1.0
    assert giou_1d((0, 1), (2, 3)) == pytest.approx(-1 / 3)
    assert giou_1d((0, 1), (9, 10)) == pytest.approx(-0.8)


def test_iou_properties_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a, b = _random_segment(rng), _random_segment(rng)
        iou = temporal_iou(a, b)
        assert iou == pytest.approx(temporal_iou(b, a))
        assert 0.0 <= iou <= 1.0
        g = giou_1d(a, b)
        assert -1.0 < g <= iou + 1e-12
        hull = max(a[1], b[1]) - min(a[0], b[0])
        union = (a[1] - a[0]) + (b[1] - b[0]) - max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
        if math.isclose(hull, union):
            assert g == pytest.approx(iou)
        else:
            assert g < iou


def test_pairwise_giou_matches_scalar():
    rng = np.random.default_rng(1)
    a = [_random_segment(rng) for _ in range(4)]
    b = [_random_segment(rng) for _ in range(3)]
    table = pairwise_giou(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64))
    for i, j in itertools.product(range(4), range(3)):
        assert float(table[i, j]) == pytest.approx(giou_1d(a[i], b[j]), abs=1e-12)


def test_span_conversions_are_inverse():
    cxw = torch.tensor([[0.5, 0.2], [0.3, 0.1]], dtype=torch.float64)
    torch.testing.assert_close(span_xx_to_cxw(span_cxw_to_xx(cxw)), cxw)


def _brute_force_cost(pred, p_fg, gt, weights):
    costs = []
    gt_xx = (gt[0] - gt[1] / 2, gt[0] + gt[1] / 2)
    for (c, w), p in zip(pred, p_fg):
        giou = giou_1d((c - w / 2, c + w / 2), gt_xx)
        costs.append(weights.l1 * abs(c - gt[0]) + weights.giou * (1 - giou) - weights.ce * math.log(p))
    return costs


def test_match_target_single_query():
    pred = torch.tensor([[0.9, 0.05]], dtype=torch.float64)
    assert match_target(pred, _logits([0.01]), torch.tensor([0.1, 0.1], dtype=torch.float64), DEFAULT_WEIGHTS) == 0


def test_match_target_exact_match_wins():
    gt = torch.tensor([0.5, 0.2], dtype=torch.float64)
    pred = torch.tensor([[0.1, 0.05], [0.5, 0.2], [0.9, 0.05]], dtype=torch.float64)
    assert match_target(pred, _logits([0.01, 0.99, 0.01]), gt, DEFAULT_WEIGHTS) == 1


def test_match_target_matches_exhaustive_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(200):
        pred = rng.uniform(0.05, 0.95, size=(5, 2))
        p_fg = rng.uniform(0.01, 0.99, size=5)
        gt = rng.uniform(0.1, 0.9, size=2)
        costs = _brute_force_cost(pred, p_fg, gt, DEFAULT_WEIGHTS)
        best = min(range(5), key=lambda i: (costs[i], i))
        chosen = match_target(
            torch.tensor(pred, dtype=torch.float64), _logits(p_fg), torch.tensor(gt, dtype=torch.float64), DEFAULT_WEIGHTS
        )
        assert chosen == best


def test_match_target_ties_go_to_lowest_index():
    gt = torch.tensor([0.5, 0.2], dtype=torch.float64)
    pred = torch.tensor([[0.2, 0.1], [0.2, 0.1], [0.2, 0.1]], dtype=torch.float64)
    assert match_target(pred, _logits([0.5, 0.5, 0.5]), gt, DEFAULT_WEIGHTS) == 0


def test_match_target_argmin_stable_under_constant_shift():
    rng = np.random.default_rng(3)
    pred = torch.tensor(rng.uniform(0.1, 0.9, size=(6, 2)), dtype=torch.float64)
    p_fg = rng.uniform(0.05, 0.9, size=6)
    gt = torch.tensor([0.4, 0.3], dtype=torch.float64)
    # halving every p(fg) adds the same lambda_ce * log 2 to every cost
    assert match_target(pred, _logits(p_fg), gt, DEFAULT_WEIGHTS) == match_target(pred, _logits(p_fg * 0.5), gt, DEFAULT_WEIGHTS)


def test_match_targets_one_to_one():
    pred = torch.tensor([[0.2, 0.1], [0.5, 0.1], [0.8, 0.1]], dtype=torch.float64)
    gt = torch.tensor([[0.79, 0.1], [0.21, 0.1]], dtype=torch.float64)
    matches = match_targets(pred, _logits([0.5, 0.5, 0.5]), gt, DEFAULT_WEIGHTS)
    assert matches == [(2, 0), (0, 1)]


def test_combine_moment_terms_default_weights():
    assert abs(combine_moment_terms(0.1, 0.25, 0.2, DEFAULT_WEIGHTS) - 2.05) < 1e-9


def test_moment_loss_perfect_prediction_is_zero():
    gt = torch.tensor([[0.5, 0.2]], dtype=torch.float64)
    pred = torch.tensor([[0.5, 0.2], [0.1, 0.1]], dtype=torch.float64)
    logits = torch.tensor([[60.0, -60.0], [-60.0, 60.0]], dtype=torch.float64)
    terms = moment_loss(pred, logits, gt, [(0, 0)], DEFAULT_WEIGHTS)
    assert float(terms["l_mr"]) < 1e-12
    assert float(terms["ce"]) >= 0.0


def test_moment_loss_values():
    gt = torch.tensor([[0.5, 0.2]], dtype=torch.float64)
    pred = torch.tensor([[0.55, 0.3], [0.1, 0.1]], dtype=torch.float64)
    logits = _logits([0.8, 0.3])
    terms = moment_loss(pred, logits, gt, [(0, 0)], DEFAULT_WEIGHTS)
    assert float(terms["l1"]) == pytest.approx(0.05 + 0.1)
    assert float(terms["giou"]) == pytest.approx(1 - giou_1d((0.4, 0.7), (0.4, 0.6)))
    assert float(terms["ce"]) == pytest.approx(-(math.log(0.8) + math.log(0.7)) / 2)
    expected = 10 * float(terms["l1"]) + float(terms["giou"]) + 4 * float(terms["ce"])
    assert float(terms["l_mr"]) == pytest.approx(expected)


def test_moment_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        pred = torch.tensor(rng.uniform(0.2, 0.8, size=(3, 2)) * [1.0, 0.4], dtype=torch.float64, requires_grad=True)
        logits = torch.tensor(rng.standard_normal((3, 2)), dtype=torch.float64, requires_grad=True)
        gt = torch.tensor([[rng.uniform(0.3, 0.7), rng.uniform(0.05, 0.3)]], dtype=torch.float64)
        matches = match_targets(pred.detach(), logits.detach(), gt, DEFAULT_WEIGHTS)
        assert torch.autograd.gradcheck(
            lambda p, l: moment_loss(p, l, gt, matches, DEFAULT_WEIGHTS)["l_mr"], (pred, logits), eps=1e-6, atol=1e-6
        )


def test_contrastive_loss_values():
    assert float(contrastive_loss(torch.zeros(1, dtype=torch.float64))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(contrastive_loss(torch.tensor([-20.0], dtype=torch.float64))) == pytest.approx(2.06e-9, rel=1e-2)


def test_contrastive_loss_monotone_and_finite():
    grid = torch.linspace(-50, 200, 501, dtype=torch.float64)
    values = torch.stack([contrastive_loss(s.reshape(1)) for s in grid])
    assert torch.isfinite(values).all()
    assert (values >= 0).all()
    assert (values[1:] > values[:-1]).all()


def test_contrastive_loss_mask():
    scores = torch.tensor([[0.0, 100.0]], dtype=torch.float64)
    mask = torch.tensor([[True, False]])
    assert float(contrastive_loss(scores, mask)) == pytest.approx(math.log(2))


def test_contrastive_gradient():
    s = torch.tensor(np.random.default_rng(5).standard_normal((3, 4)), dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(contrastive_loss, (s,), eps=1e-6, atol=1e-6)


def test_positive_saliency_loss():
    assert float(positive_saliency_loss(torch.zeros(2, dtype=torch.float64))) == pytest.approx(math.log(2))
    assert float(positive_saliency_loss(torch.tensor([30.0], dtype=torch.float64))) < 1e-12


def test_total_loss():
    assert total_loss(2.05, 0.69, DEFAULT_WEIGHTS) == pytest.approx(2.74)
    assert total_loss(2.05, 0.69, LossWeights(cont=0.0)) == 2.05
    assert total_loss(0.0, 0.0, DEFAULT_WEIGHTS) == 0.0


def test_loss_weights_validation():
    with pytest.raises(pydantic.ValidationError):
        LossWeights(l1=-1.0)
    with pytest.raises(pydantic.ValidationError):
        LossWeights(unknown=1.0)


def test_normalize_windows():
    spans = normalize_windows([(10.0, 20.0)], 40.0, torch.float64)
    torch.testing.assert_close(spans, torch.tensor([[0.375, 0.25]], dtype=torch.float64))
    with pytest.raises(ValidationError):
        normalize_windows([], 40.0)


def test_kink_signature_tracks_residual_sign():
    gt = torch.tensor([[0.5, 0.2]], dtype=torch.float64)
    above = torch.tensor([[0.51, 0.2]], dtype=torch.float64)
    below = torch.tensor([[0.49, 0.2]], dtype=torch.float64)
    assert kink_signature(above, gt, [(0, 0)]) != kink_signature(below, gt, [(0, 0)])
    nudged = torch.tensor([[0.52, 0.21]], dtype=torch.float64)
    assert kink_signature(above + 1e-4, gt, [(0, 0)]) == kink_signature(nudged, gt, [(0, 0)])


def test_criterion_batch():
    pred = torch.tensor([[[0.5, 0.2], [0.2, 0.1]], [[0.3, 0.1], [0.7, 0.2]]], dtype=torch.float64)
    logits = torch.zeros(2, 2, 2, dtype=torch.float64)
    targets = [
        torch.tensor([[0.5, 0.2]], dtype=torch.float64),
        torch.tensor([[0.7, 0.2]], dtype=torch.float64),
    ]
    s_neg = torch.zeros(2, 3, dtype=torch.float64)
    out = Criterion(DEFAULT_WEIGHTS)(pred, logits, targets, s_neg=s_neg, s_neg_mask=torch.ones(2, 3, dtype=torch.bool))
    assert out.breakdown.matched_query_index == (0, 1)
    assert out.breakdown.l1 == pytest.approx(0.0)
    assert out.breakdown.l_cont == pytest.approx(math.log(2))
    assert out.breakdown.total == pytest.approx(out.breakdown.l_mr + math.log(2))
    assert out.per_sample_mr.shape == (2,)
    assert set(out.breakdown.as_row()) == {"l1", "giou", "ce", "l_mr", "l_cont", "total"}


def test_criterion_without_negatives():
    pred = torch.tensor([[[0.5, 0.2]]], dtype=torch.float64)
    targets = [torch.tensor([[0.5, 0.2]], dtype=torch.float64)]
    out = Criterion(DEFAULT_WEIGHTS)(pred, torch.zeros(1, 1, 2, dtype=torch.float64), targets)
    assert out.breakdown.l_cont == 0.0


def test_criterion_breakdown_on_grad_tensors_is_silent():
    pred = torch.tensor([[[0.5, 0.2], [0.2, 0.1]]], dtype=torch.float64, requires_grad=True)
    logits = torch.zeros(1, 2, 2, dtype=torch.float64, requires_grad=True)
    s_neg = torch.zeros(1, 3, dtype=torch.float64, requires_grad=True)
    targets = [torch.tensor([[0.5, 0.2]], dtype=torch.float64)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = Criterion(DEFAULT_WEIGHTS)(pred, logits, targets, s_neg=s_neg, s_neg_mask=torch.ones(1, 3, dtype=torch.bool))
    assert isinstance(out.breakdown.total, float)
    assert out.total.requires_grad
