"""
The LMR network.

Pipeline: project the visual, context and query features to d; fuse each video
stream with the query words in the VQF blocks (one shared stack for both
streams); encode [saliency token; visual; context] in the VCM self-attention
layers and score clip relevance against the saliency token; decode k
language-conditioned moment queries against the encoder output.

All modules take padded batches (B, N, D) with boolean masks marking real rows.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from lmr.errors import ShapeError

logger = logging.getLogger(__name__)

# stream-type ids of the VCM sequence
SALIENCY, VISUAL, CONTEXT = 0, 1, 2

# keeps predicted centers and widths strictly inside (0, 1) once float32 sigmoid saturates
SPAN_EPS = 1e-6


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_dim: int = 256
    heads: int = 8
    vqf_layers: int = 2
    vcm_layers: int = 2
    decoder_layers: int = 2
    k_moment_queries: int = 10
    visual_dim: int = 64
    text_dim: int = 64
    dropout: float = 0.1
    ffn_expansion: float = 1.0
    init_seed: int = 0

    # ablation axes, all on for the full model
    use_context: bool = True
    use_visual: bool = True
    use_vqf: bool = True
    share_vqf_weights: bool = True
    language_queries: bool = True
    clip_positions: bool = True

    @field_validator("hidden_dim", "heads", "vqf_layers", "vcm_layers", "decoder_layers", "k_moment_queries")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("visual_dim", "text_dim")
    @classmethod
    def _positive_dim(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"feature dimensions must be positive, got {v}")
        return v

    @field_validator("dropout")
    @classmethod
    def _dropout_range(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {v}")
        return v

    @field_validator("ffn_expansion")
    @classmethod
    def _positive_expansion(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"ffn_expansion must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "ModelConfig":
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if not (self.use_context or self.use_visual):
            raise ValueError("at least one of use_context and use_visual must be on")
        return self

    @property
    def ffn_dim(self) -> int:
        return max(1, int(round(self.hidden_dim * self.ffn_expansion)))


def cross_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: Optional[torch.Tensor] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    softmax(Q K^T / sqrt(d)) V over any leading batch dimensions.

    Args:
        q: (..., n, d)
        k: (..., m, d)
        v: (..., m, dv)
        mask: (..., m) True for keys that may be attended

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: output (..., n, dv) and weights (..., n, m)
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if q.shape[-1] == 0 or k.shape[-2] == 0:
        raise ShapeError(f"empty attention operands: q {tuple(q.shape)}, k {tuple(k.shape)}")

    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, query, key, value, key_mask=None):
        """Returns the attended output (B, n, d) and head-averaged weights (B, n, m)."""
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        mask = key_mask[:, None, :] if key_mask is not None else None
        out, weights = cross_attention(q, k, v, mask)
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, -1)
        return self.out_proj(out), weights.mean(dim=1)


class MLP(nn.Module):
    """Feed-forward block with GELU between layers."""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int = 2):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1) + [output_dim]
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class VQFLayer(nn.Module):
    """Video-query fusion: the stream attends over the query words, out = LN(x + MLP(attn))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.attn = MultiHeadAttention(d, cfg.heads)
        self.mlp = MLP(d, cfg.ffn_dim, d)
        self.norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, stream, language, language_mask):
        attended, weights = self.attn(stream, language, language, language_mask)
        return self.norm(stream + self.dropout(self.mlp(attended))), weights


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.self_attn = MultiHeadAttention(d, cfg.heads)
        self.ffn = MLP(d, cfg.ffn_dim, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        attended, weights = self.self_attn(x, x, x, mask)
        x = self.norm1(x + self.dropout(attended))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, weights


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.self_attn = MultiHeadAttention(d, cfg.heads)
        self.cross_attn = MultiHeadAttention(d, cfg.heads)
        self.ffn = MLP(d, cfg.ffn_dim, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, h, memory, memory_mask):
        attended, _ = self.self_attn(h, h, h)
        h = self.norm1(h + self.dropout(attended))
        attended, weights = self.cross_attn(h, memory, memory, memory_mask)
        h = self.norm2(h + self.dropout(attended))
        h = self.norm3(h + self.dropout(self.ffn(h)))
        return h, weights


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : d // 2]
    return table.to(dtype)


@dataclass
class SequenceLayout:
    """Where each stream sits in the VCM sequence (row 0 is the saliency token)."""

    visual: Optional[slice]
    context: Optional[slice]

    @property
    def scored(self) -> slice:
        return self.visual if self.visual is not None else self.context


@dataclass
class EncoderOutput:
    encoder_seq: torch.Tensor
    encoder_mask: torch.Tensor
    relevance: torch.Tensor
    relevance_mask: torch.Tensor
    layout: SequenceLayout
    attentions: Optional[Dict[str, List[torch.Tensor]]] = None


@dataclass
class ForwardOutput:
    relevance: torch.Tensor
    relevance_mask: torch.Tensor
    encoder_seq: torch.Tensor
    encoder_mask: torch.Tensor
    decoder_out: torch.Tensor
    moments: torch.Tensor
    class_logits: torch.Tensor
    layout: SequenceLayout
    attentions: Optional[Dict[str, List[torch.Tensor]]] = None

    @property
    def batch_size(self) -> int:
        return self.moments.shape[0]

    def select(self, i: int) -> "ForwardOutput":
        """Sample i of the batch, keeping a batch dimension of 1."""
        attentions = None
        if self.attentions is not None:
            attentions = {name: [w[i : i + 1] for w in maps] for name, maps in self.attentions.items()}
        return replace(
            self,
            relevance=self.relevance[i : i + 1],
            relevance_mask=self.relevance_mask[i : i + 1],
            encoder_seq=self.encoder_seq[i : i + 1],
            encoder_mask=self.encoder_mask[i : i + 1],
            decoder_out=self.decoder_out[i : i + 1],
            moments=self.moments[i : i + 1],
            class_logits=self.class_logits[i : i + 1],
            attentions=attentions,
        )


class LMR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim

        self.visual_proj = nn.Linear(cfg.visual_dim, d)
        self.text_proj = nn.Linear(cfg.text_dim, d)

        self.vqf = nn.ModuleList(VQFLayer(cfg) for _ in range(cfg.vqf_layers))
        # a second stack only when weight sharing is ablated
        self.vqf_context = (
            None if cfg.share_vqf_weights else nn.ModuleList(VQFLayer(cfg) for _ in range(cfg.vqf_layers))
        )

        self.saliency_token = nn.Parameter(torch.randn(d))
        self.stream_type = nn.Embedding(3, d)
        self.vcm = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.vcm_layers))
        self.saliency_proj = nn.Linear(d, d, bias=False)
        self.clip_proj = nn.Linear(d, d, bias=False)

        self.query_pos = nn.Embedding(cfg.k_moment_queries, d)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.span_head = MLP(d, d, 2)
        self.class_head = nn.Linear(d, 2)
        self.dropout = nn.Dropout(cfg.dropout)

    def _vqf_stack(self, stream_kind: int) -> nn.ModuleList:
        if stream_kind == CONTEXT and self.vqf_context is not None:
            return self.vqf_context
        return self.vqf

    def project_language(self, query: torch.Tensor) -> torch.Tensor:
        return self.text_proj(query)

    def project_stream(self, features: torch.Tensor, stream_kind: int) -> torch.Tensor:
        proj = self.visual_proj if stream_kind == VISUAL else self.text_proj
        x = proj(features)
        if self.cfg.clip_positions:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        return self.dropout(x)

    def vqf_forward(self, stream, language, language_mask, stream_kind: int = VISUAL, attentions=None):
        """
        Fuse a projected (B, N, d) stream with projected query words.

        The visual and context streams go through the same layers unless weight
        sharing is ablated.
        """
        if stream.shape[1] == 0:
            raise ShapeError("VQF needs a non-empty stream")
        if not self.cfg.use_vqf:
            return stream
        for layer in self._vqf_stack(stream_kind):
            stream, weights = layer(stream, language, language_mask)
            if attentions is not None:
                attentions["vqf_visual" if stream_kind == VISUAL else "vqf_context"].append(weights)
        return stream

    def relevance_scores(self, saliency_out: torch.Tensor, clip_out: torch.Tensor) -> torch.Tensor:
        """S_i = (w_s x_s) . (w_v x_i) / sqrt(d) for every clip token."""
        u = self.saliency_proj(saliency_out)
        v = self.clip_proj(clip_out)
        return (u.unsqueeze(1) * v).sum(-1) / math.sqrt(u.shape[-1])

    def vcm_forward(self, visual, visual_mask, context, context_mask, attentions=None) -> EncoderOutput:
        """
        Encode [saliency token; visual; context] and score every visual clip.

        With the visual stream ablated the context tokens are scored instead.
        """
        b, d = (visual if visual is not None else context).shape[0], self.cfg.hidden_dim
        parts = [(self.saliency_token + self.stream_type.weight[SALIENCY]).expand(b, 1, d)]
        masks = [torch.ones(b, 1, dtype=torch.bool)]
        cursor = 1
        visual_slice = context_slice = None
        if visual is not None:
            parts.append(visual + self.stream_type.weight[VISUAL])
            masks.append(visual_mask)
            visual_slice = slice(cursor, cursor + visual.shape[1])
            cursor += visual.shape[1]
        if context is not None:
            parts.append(context + self.stream_type.weight[CONTEXT])
            masks.append(context_mask)
            context_slice = slice(cursor, cursor + context.shape[1])
            cursor += context.shape[1]

        x = torch.cat(parts, dim=1)
        mask = torch.cat(masks, dim=1)
        for layer in self.vcm:
            x, weights = layer(x, mask)
            if attentions is not None:
                attentions["vcm"].append(weights)

        layout = SequenceLayout(visual=visual_slice, context=context_slice)
        scored_mask = mask[:, layout.scored]
        relevance = self.relevance_scores(x[:, 0], x[:, layout.scored])
        relevance = relevance.masked_fill(~scored_mask, 0.0)
        return EncoderOutput(
            encoder_seq=x,
            encoder_mask=mask,
            relevance=relevance,
            relevance_mask=scored_mask,
            layout=layout,
            attentions=attentions,
        )

    def build_moment_queries(self, language, language_mask) -> torch.Tensor:
        """Mean-pooled query words replicated k times plus k learned positions."""
        positions = self.query_pos.weight.unsqueeze(0)
        if not self.cfg.language_queries:
            return positions.expand(language.shape[0], -1, -1)
        weights = language_mask.to(language.dtype).unsqueeze(-1)
        pooled = (language * weights).sum(1) / weights.sum(1).clamp(min=1)
        return pooled.unsqueeze(1) + positions

    def decode(self, moment_queries, encoder_seq, encoder_mask, attentions=None):
        h = moment_queries
        for layer in self.decoder:
            h, weights = layer(h, encoder_seq, encoder_mask)
            if attentions is not None:
                attentions["decoder"].append(weights)
        moments = torch.sigmoid(self.span_head(h)).clamp(SPAN_EPS, 1 - SPAN_EPS)
        return h, moments, self.class_head(h)

    def encode(
        self,
        visual: torch.Tensor,
        context: torch.Tensor,
        query: torch.Tensor,
        visual_mask: Optional[torch.Tensor] = None,
        context_mask: Optional[torch.Tensor] = None,
        query_mask: Optional[torch.Tensor] = None,
        record_attention: bool = False,
    ) -> Tuple[EncoderOutput, torch.Tensor, torch.Tensor]:
        """Everything up to the VCM output; negatives only need this part."""
        self._check_inputs(visual, context, query)
        visual_mask = _full_mask(visual) if visual_mask is None else visual_mask
        context_mask = _full_mask(context) if context_mask is None else context_mask
        query_mask = _full_mask(query) if query_mask is None else query_mask
        attentions = (
            {"vqf_visual": [], "vqf_context": [], "vcm": [], "decoder": []} if record_attention else None
        )

        language = self.project_language(query)
        fused_visual = fused_context = None
        if self.cfg.use_visual:
            fused_visual = self.vqf_forward(
                self.project_stream(visual, VISUAL), language, query_mask, VISUAL, attentions
            )
        if self.cfg.use_context:
            fused_context = self.vqf_forward(
                self.project_stream(context, CONTEXT), language, query_mask, CONTEXT, attentions
            )
        encoded = self.vcm_forward(fused_visual, visual_mask, fused_context, context_mask, attentions)
        return encoded, language, query_mask

    def forward(
        self,
        visual: torch.Tensor,
        context: torch.Tensor,
        query: torch.Tensor,
        visual_mask: Optional[torch.Tensor] = None,
        context_mask: Optional[torch.Tensor] = None,
        query_mask: Optional[torch.Tensor] = None,
        record_attention: bool = False,
    ) -> ForwardOutput:
        encoded, language, query_mask = self.encode(
            visual, context, query, visual_mask, context_mask, query_mask, record_attention
        )
        moment_queries = self.build_moment_queries(language, query_mask)
        h, moments, class_logits = self.decode(
            moment_queries, encoded.encoder_seq, encoded.encoder_mask, encoded.attentions
        )
        return ForwardOutput(
            relevance=encoded.relevance,
            relevance_mask=encoded.relevance_mask,
            encoder_seq=encoded.encoder_seq,
            encoder_mask=encoded.encoder_mask,
            decoder_out=h,
            moments=moments,
            class_logits=class_logits,
            layout=encoded.layout,
            attentions=encoded.attentions,
        )

    def _check_inputs(self, visual, context, query):
        for name, x, dim in (
            ("visual", visual, self.cfg.visual_dim),
            ("context", context, self.cfg.text_dim),
            ("query", query, self.cfg.text_dim),
        ):
            if x.dim() != 3 or x.shape[-1] != dim:
                raise ShapeError(f"{name} features must be (B, N, {dim}), got {tuple(x.shape)}")
            if x.shape[1] == 0:
                raise ShapeError(f"{name} features have no rows")
        if visual.shape[0] != context.shape[0] or visual.shape[0] != query.shape[0]:
            raise ShapeError("visual, context and query batch sizes differ")
        if visual.shape[1] != context.shape[1]:
            raise ShapeError(f"{visual.shape[1]} visual clips but {context.shape[1]} context clips")


def _full_mask(x: torch.Tensor) -> torch.Tensor:
    return torch.ones(x.shape[:2], dtype=torch.bool)


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> LMR:
    """Initialize from cfg.init_seed without touching the global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.init_seed)
        model = LMR(cfg)
    return model.to(dtype)


def flatten_params(model: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def unflatten_params(model: nn.Module, vector: torch.Tensor) -> None:
    expected = sum(p.numel() for p in model.parameters())
    if vector.numel() != expected:
        raise ShapeError(f"parameter vector has {vector.numel()} entries, model has {expected}")
    with torch.no_grad():
        nn.utils.vector_to_parameters(vector.to(next(model.parameters()).dtype), model.parameters())


def named_parameter_slices(model: nn.Module) -> List[Tuple[str, slice, Tuple[int, ...]]]:
    """(name, slice into the flat vector, shape) in parameters() order."""
    out = []
    offset = 0
    for name, p in model.named_parameters():
        out.append((name, slice(offset, offset + p.numel()), tuple(p.shape)))
        offset += p.numel()
    return out


@dataclass
class Batch:
    visual: torch.Tensor
    context: torch.Tensor
    query: torch.Tensor
    visual_mask: torch.Tensor
    context_mask: torch.Tensor
    query_mask: torch.Tensor
    qids: List[str] = field(default_factory=list)

    def inputs(self, index=None) -> Dict[str, torch.Tensor]:
        names = ("visual", "context", "query", "visual_mask", "context_mask", "query_mask")
        if index is None:
            return {n: getattr(self, n) for n in names}
        return {n: getattr(self, n)[index] for n in names}


def _pad(arrays: Sequence[np.ndarray], dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    rows = max(a.shape[0] for a in arrays)
    cols = arrays[0].shape[1]
    out = np.zeros((len(arrays), rows, cols), dtype=np.float64)
    mask = np.zeros((len(arrays), rows), dtype=bool)
    for i, a in enumerate(arrays):
        if a.shape[1] != cols:
            raise ShapeError(f"feature widths differ within a batch: {a.shape[1]} != {cols}")
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return torch.from_numpy(out).to(dtype), torch.from_numpy(mask)


def collate(
    bundles: Sequence,
    dtype: torch.dtype = torch.float32,
    ablate_context: bool = False,
    ablate_visual: bool = False,
) -> Batch:
    """
    Pad a list of EpisodeBundles into one Batch.

    ablate_context / ablate_visual zero that stream at the input.
    """
    visual, visual_mask = _pad([b.visual.data for b in bundles], dtype)
    context, context_mask = _pad([b.context.data for b in bundles], dtype)
    query, query_mask = _pad([b.query_features.data for b in bundles], dtype)
    if ablate_context:
        context = torch.zeros_like(context)
    if ablate_visual:
        visual = torch.zeros_like(visual)
    return Batch(
        visual=visual,
        context=context,
        query=query,
        visual_mask=visual_mask,
        context_mask=context_mask,
        query_mask=query_mask,
        qids=[b.record.qid for b in bundles],
    )
