"""Attention and feed-forward building blocks shared by the encoders."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     allowed: torch.Tensor | None):
    """Scaled dot-product attention with a boolean allow-mask.

    q, k, v: [..., heads, Lq/Lk, dh]. ``allowed`` broadcasts to
    [..., heads, Lq, Lk]; True marks positions a query may attend. Rows with
    no allowed key fall back to key 0 so the softmax stays finite; callers
    zero those rows afterwards. Disallowed keys receive exactly zero weight,
    so neither values nor gradients leak through them.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = torch.matmul(q, k.transpose(-2, -1)) * scale
    if allowed is not None:
        row_any = allowed.any(dim=-1, keepdim=True)
        first = torch.zeros(allowed.shape[-1], dtype=torch.bool, device=allowed.device)
        first[0] = True
        safe = allowed | (~row_any & first)
        logits = logits.masked_fill(~safe, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    return torch.matmul(attn, v), attn


def split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    n, length, dim = x.shape
    return x.view(n, length, num_heads, dim // num_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    n, heads, length, dh = x.shape
    return x.transpose(1, 2).reshape(n, length, heads * dh)


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention honoring a per-pair boolean allow-mask."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, allowed=None, return_attn=False):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (split_heads(t, self.num_heads) for t in (q, k, v))
        mask = allowed.unsqueeze(1) if allowed is not None else None
        out, attn = masked_attention(q, k, v, mask)
        out = self.proj(merge_heads(out))
        return (out, attn) if return_attn else (out, None)


class CrossAttention(nn.Module):
    """Multi-head cross-attention; memory may live in a different width."""

    def __init__(self, dim: int, num_heads: int, memory_dim: int | None = None):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        memory_dim = memory_dim or dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(memory_dim, dim)
        self.v_proj = nn.Linear(memory_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, memory, return_attn=False):
        q = split_heads(self.q_proj(x), self.num_heads)
        k = split_heads(self.k_proj(memory), self.num_heads)
        v = split_heads(self.v_proj(memory), self.num_heads)
        out, attn = masked_attention(q, k, v, None)
        out = self.proj(merge_heads(out))
        return (out, attn) if return_attn else (out, None)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def init_weights(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Re-initialize every parameter from a seeded generator.

    Linear/conv/embedding weights get truncated normal(0, std) clipped at
    two sigma; biases and norm offsets go to zero, norm scales to one.
    Makes model construction independent of global RNG state.
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding, nn.Conv3d, nn.ConvTranspose3d)):
            _trunc_normal_(m.weight, std, generator)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for name, p in module.named_parameters(recurse=True):
        if "relative_bias" in name:
            _trunc_normal_(p, std, generator)


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    with torch.no_grad():
        tmp = torch.empty(tensor.shape + (4,), dtype=tensor.dtype)
        tmp.normal_(0.0, std, generator=generator)
        valid = (tmp > -2 * std) & (tmp < 2 * std)
        ind = valid.to(torch.uint8).argmax(dim=-1, keepdim=True)
        tensor.copy_(tmp.gather(-1, ind).squeeze(-1).clamp_(-2 * std, 2 * std))
