"""Shared-space projections and the hierarchical contrastive losses.

Global alignment contrasts pooled scan embeddings against report [CLS]
embeddings. The two local levels first contextualize sentence/word
embeddings by cross-attending over a visual feature map, then contrast a
pair-level similarity built from per-unit cosines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchTooSmall, EmptyContext, NoValidUnits


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of a and rows of b."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def info_nce(sim: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """Symmetric cross-entropy over a similarity matrix with diagonal positives."""
    logits = sim / tau
    targets = torch.arange(sim.shape[0], device=sim.device)
    return 0.5 * (F.cross_entropy(logits, targets)
                  + F.cross_entropy(logits.T, targets))


def loss_cm_top(g_v: torch.Tensor, g_t: torch.Tensor,
                tau: torch.Tensor | float) -> torch.Tensor:
    if g_v.shape[0] < 2:
        raise BatchTooSmall(f"global contrastive loss needs N >= 2, got {g_v.shape[0]}")
    return info_nce(cosine_matrix(g_v, g_t), tau)


def contextualize(queries: torch.Tensor, context: torch.Tensor,
                  query_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Single-head scaled dot-product cross-attention readout.

    queries: [N, K, d]; context: [N, T, d] (keys and values of the same
    pair). Rows for masked queries are zeroed.
    """
    if context.shape[1] < 1:
        raise EmptyContext("cross-attention needs at least one context token")
    attn = torch.softmax(
        queries @ context.transpose(1, 2) / math.sqrt(queries.shape[-1]), dim=-1)
    out = attn @ context
    if query_mask is not None:
        out = out * query_mask.unsqueeze(-1)
    return out


def contextualize_all_pairs(queries: torch.Tensor,
                            context: torch.Tensor) -> torch.Tensor:
    """Cross-pair readout: out[i, j, k] = pair j's query k attended over
    pair i's context tokens. Returns [N_ctx, N_q, K, d]."""
    if context.shape[1] < 1:
        raise EmptyContext("cross-attention needs at least one context token")
    scale = 1.0 / math.sqrt(queries.shape[-1])
    logits = torch.einsum("nkd,mtd->mnkt", queries, context) * scale
    attn = torch.softmax(logits, dim=-1)
    return torch.einsum("mnkt,mtd->mnkd", attn, context)


def loss_cm_local(queries: torch.Tensor, query_mask: torch.Tensor,
                  context: torch.Tensor, tau: torch.Tensor | float,
                  aggregation: str = "mean") -> torch.Tensor:
    """Local contrastive loss between contextualized and original text units.

    queries: [N, K, d] sentence or word embeddings with validity mask
    [N, K]; context: [N, T, d] visual tokens. The pair score a(i, j)
    aggregates cos(contextualized unit, original unit) over pair j's valid
    units against pair i's visual context; the N x N score matrix feeds a
    symmetric InfoNCE with diagonal positives.
    """
    counts = query_mask.sum(dim=1)
    if (counts == 0).any():
        raise NoValidUnits("every pair needs at least one valid text unit")
    ctx = contextualize_all_pairs(queries, context)  # [N_ctx, N_q, K, d]
    cos = (F.normalize(ctx, dim=-1)
           * F.normalize(queries, dim=-1).unsqueeze(0)).sum(-1)  # [N_ctx, N_q, K]
    valid = query_mask.bool().unsqueeze(0)
    counts = counts.unsqueeze(0).to(cos.dtype)
    if aggregation == "mean":
        sim = (cos * valid).sum(-1) / counts
    elif aggregation == "lse":
        sim = torch.logsumexp(cos.masked_fill(~valid, float("-inf")), dim=-1) \
            - torch.log(counts)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return info_nce(sim, tau)


class Temperatures(nn.Module):
    """One learnable temperature per objective, clamped to [1e-3, 10]."""

    def __init__(self, names: tuple[str, ...] = ("top", "mid", "bot", "con"),
                 init: float = 0.07):
        super().__init__()
        self.log_tau = nn.ParameterDict(
            {name: nn.Parameter(torch.tensor(math.log(init))) for name in names})

    def tau(self, name: str) -> torch.Tensor:
        return self.log_tau[name].exp().clamp(1e-3, 10.0)


@dataclass
class SharedEmbeddings:
    """All features projected into the joint space (unnormalized; cosine
    terms normalize at use site)."""

    g_v_top: torch.Tensor   # [N, d]
    g_v_mid: torch.Tensor   # [N, T_m, d]
    g_v_bot: torch.Tensor   # [N, T_b, d]
    g_t_rep: torch.Tensor   # [N, d]
    g_t_sent: torch.Tensor  # [N, S, d]
    sent_valid: torch.Tensor
    g_t_word: torch.Tensor  # [N, W, d]
    word_valid: torch.Tensor


class ProjectionHeads(nn.Module):
    """Per-level linear maps into the shared embedding space.

    The bottom visual map is average-pooled down to at most
    ``bot_token_cap`` tokens before projection to keep all-pairs
    cross-attention tractable.
    """

    def __init__(self, c_v_bot: int, c_v_mid: int, c_v_top: int, c_t: int,
                 dim: int = 512, bot_token_cap: int = 512):
        super().__init__()
        self.dim = dim
        self.bot_token_cap = bot_token_cap
        self.v_top = nn.Linear(c_v_top, dim)
        self.v_mid = nn.Linear(c_v_mid, dim)
        self.v_bot = nn.Linear(c_v_bot, dim)
        self.t_rep = nn.Linear(c_t, dim)
        self.t_sent = nn.Linear(c_t, dim)
        self.t_word = nn.Linear(c_t, dim)

    def pool_bot(self, f_bot: torch.Tensor) -> torch.Tensor:
        """[N, C, D, H, W] -> [N, T <= cap, C]."""
        tokens = f_bot.shape[2] * f_bot.shape[3] * f_bot.shape[4]
        p = 1
        while tokens > self.bot_token_cap:
            p += 1
            tokens = math.prod(-(-s // p) for s in f_bot.shape[2:])
        if p > 1:
            f_bot = F.avg_pool3d(f_bot, kernel_size=p, stride=p, ceil_mode=True,
                                 count_include_pad=False)
        return f_bot.flatten(2).transpose(1, 2)

    def forward(self, pyramid, text) -> SharedEmbeddings:
        return SharedEmbeddings(
            g_v_top=self.v_top(pyramid.pooled_top),
            g_v_mid=self.v_mid(pyramid.tokens("mid")),
            g_v_bot=self.v_bot(self.pool_bot(pyramid.f_bot)),
            g_t_rep=self.t_rep(text.f_t_rep),
            g_t_sent=self.t_sent(text.f_t_sent) * text.sent_valid.unsqueeze(-1),
            sent_valid=text.sent_valid,
            g_t_word=self.t_word(text.f_t_word) * text.word_valid.unsqueeze(-1),
            word_valid=text.word_valid,
        )


def loss_cm(emb: SharedEmbeddings, temps: Temperatures,
            enabled: tuple[str, ...] = ("top", "mid", "bot"),
            aggregation: str = "mean"):
    """Sum of the enabled per-level contrastive losses.

    Returns (total, components); disabled levels are skipped entirely so
    they contribute no gradient.
    """
    components: dict[str, torch.Tensor] = {}
    if "top" in enabled:
        components["cm_top"] = loss_cm_top(emb.g_v_top, emb.g_t_rep, temps.tau("top"))
    if "mid" in enabled:
        components["cm_mid"] = loss_cm_local(
            emb.g_t_sent, emb.sent_valid, emb.g_v_mid, temps.tau("mid"), aggregation)
    if "bot" in enabled:
        components["cm_bot"] = loss_cm_local(
            emb.g_t_word, emb.word_valid, emb.g_v_bot, temps.tau("bot"), aggregation)
    total = sum(components.values()) if components else torch.tensor(0.0)
    return total, components
