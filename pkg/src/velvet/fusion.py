"""Multi-modal encoder and matching objectives.

Decoder blocks run on top of the text encoder's token states (no
re-embedding): masked self-attention over text, cross-attention into the
visual token memory, then feed-forward. The fused [CLS] state summarizes a
pair for binary matching; fused token states feed the vision-conditioned
MLM loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchTooSmall, EmptyContext, ShapeMismatch
from .layers import CrossAttention, FeedForward, MaskedSelfAttention
from .ssl_tasks import loss_mlm


@dataclass(frozen=True)
class MultiModalConfig:
    dim: int             # equals the text encoder width
    memory_dim: int      # width of the visual tokens
    num_layers: int = 3
    num_heads: int = 4


class DecoderBlock(nn.Module):
    def __init__(self, cfg: MultiModalConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(cfg.dim)
        self.self_attn = MaskedSelfAttention(cfg.dim, cfg.num_heads)
        self.norm_cross = nn.LayerNorm(cfg.dim)
        self.cross_attn = CrossAttention(cfg.dim, cfg.num_heads, cfg.memory_dim)
        self.norm_ff = nn.LayerNorm(cfg.dim)
        self.ff = FeedForward(cfg.dim, 4 * cfg.dim)

    def forward(self, x, allowed, memory):
        h, _ = self.self_attn(self.norm_self(x), allowed)
        x = x + h
        h, _ = self.cross_attn(self.norm_cross(x), memory)
        x = x + h
        return x + self.ff(self.norm_ff(x))


class MultiModalEncoder(nn.Module):
    """Fusion stack plus the binary matching head on the fused [CLS]."""

    def __init__(self, cfg: MultiModalConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.num_layers))
        self.match_head = nn.Linear(cfg.dim, 1)

    def forward(self, token_states: torch.Tensor, attn_mask: torch.Tensor,
                vision_tokens: torch.Tensor) -> torch.Tensor:
        """Fuse text token states with visual memory; keeps the tri-level mask."""
        if vision_tokens.shape[1] < 1:
            raise EmptyContext("fusion needs at least one vision token")
        if token_states.shape[-1] != self.cfg.dim:
            raise ShapeMismatch(
                f"text width {token_states.shape[-1]} != {self.cfg.dim}")
        if vision_tokens.shape[-1] != self.cfg.memory_dim:
            raise ShapeMismatch(
                f"vision width {vision_tokens.shape[-1]} != {self.cfg.memory_dim}")
        x = token_states
        for block in self.blocks:
            x = block(x, attn_mask, vision_tokens)
        return x

    def match_logits(self, fused: torch.Tensor) -> torch.Tensor:
        """Binary matching logit per pair from the fused [CLS] state."""
        return self.match_head(fused[:, 0]).squeeze(-1)


def mine_hard_negatives(sim: torch.Tensor, rng: torch.Generator):
    """Sample one in-batch negative per row and per column of a similarity
    matrix, proportionally to softmax over the off-diagonal entries.

    Returns (neg_report_for_scan, neg_scan_for_report); the sampled index
    never equals the query's own index.
    """
    n = sim.shape[0]
    if n < 2:
        raise BatchTooSmall(f"negative mining needs N >= 2, got {n}")
    sim = sim.detach()
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    row_probs = torch.softmax(sim.masked_fill(eye, float("-inf")), dim=-1)
    col_probs = torch.softmax(sim.T.masked_fill(eye, float("-inf")), dim=-1)
    neg_rows = torch.multinomial(row_probs, 1, generator=rng).squeeze(1)
    neg_cols = torch.multinomial(col_probs, 1, generator=rng).squeeze(1)
    return neg_rows, neg_cols


def loss_match(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over matched/unmatched pairs."""
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def loss_mm_mlm(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Vision-conditioned MLM: same functional form, fused-state logits."""
    return loss_mlm(logits, labels)
