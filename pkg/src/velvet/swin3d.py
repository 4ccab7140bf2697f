"""Hierarchical 3D vision encoder with shifted-window attention.

Four stages of windowed multi-head self-attention over a patch-embedded
volume, downsampled between stages by 2x2x2 patch merging. The last three
stage outputs form the (bottom, middle, top) feature pyramid consumed by
the alignment objectives; the top map is spatially mean-pooled into the
global visual representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn

from .errors import ShapeMismatch
from .layers import FeedForward, masked_attention


@dataclass(frozen=True)
class VisionConfig:
    embed_dim: int = 48
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 6
    patch_size: int = 2
    input_size: int = 96
    in_channels: int = 1

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("exactly four stages are supported")
        if self.input_size % (self.patch_size * 8):
            raise ValueError("input_size must be divisible by patch_size * 8")

    @classmethod
    def preset(cls, name: str, **overrides) -> "VisionConfig":
        presets = {
            "swinvit-t": dict(embed_dim=48, depths=(2, 2, 2, 2), num_heads=(3, 6, 12, 24)),
            "swinvit-s": dict(embed_dim=48, depths=(2, 8, 8, 8), num_heads=(4, 8, 16, 32)),
            "swinvit-b": dict(embed_dim=96, depths=(2, 8, 8, 8), num_heads=(4, 8, 16, 32)),
            "tiny": dict(embed_dim=8, depths=(1, 1, 1, 1), num_heads=(2, 2, 2, 2),
                         window_size=4, input_size=32),
        }
        if name not in presets:
            raise ValueError(f"unknown vision preset {name!r}; have {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def stage_resolution(self, i: int) -> int:
        return self.input_size // self.patch_size // (2 ** i)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * (2 ** i)

    @property
    def top_dim(self) -> int:
        return self.stage_dim(3)

    def effective_window(self, i: int) -> int:
        """Configured window where it tiles the stage, else the full extent."""
        res = self.stage_resolution(i)
        return self.window_size if res % self.window_size == 0 else res


@dataclass
class VisionPyramid:
    """Last three stage outputs, channels-first, plus the pooled top vector."""

    f_bot: torch.Tensor   # [N, 2C, r1, r1, r1]
    f_mid: torch.Tensor   # [N, 4C, r2, r2, r2]
    f_top: torch.Tensor   # [N, 8C, r3, r3, r3]
    pooled_top: torch.Tensor  # [N, 8C]

    def tokens(self, level: str) -> torch.Tensor:
        """Flatten one pyramid level to [N, T, C]."""
        fmap = {"bot": self.f_bot, "mid": self.f_mid, "top": self.f_top}[level]
        return fmap.flatten(2).transpose(1, 2)


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """[B, D, H, W, C] -> [B * nWindows, w^3, C] in window-major order."""
    b, d, h, ww, c = x.shape
    x = x.view(b, d // w, w, h // w, w, ww // w, w, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, w ** 3, c)


def window_reverse(windows: torch.Tensor, w: int, b: int, d: int, h: int,
                   ww: int) -> torch.Tensor:
    x = windows.view(b, d // w, h // w, ww // w, w, w, w, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, ww, -1)


@lru_cache(maxsize=None)
def _relative_index(w: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(
        torch.arange(w), torch.arange(w), torch.arange(w), indexing="ij"))
    flat = coords.flatten(1)  # [3, T]
    rel = flat[:, :, None] - flat[:, None, :] + (w - 1)  # [3, T, T]
    return (rel[0] * (2 * w - 1) ** 2 + rel[1] * (2 * w - 1) + rel[2]).contiguous()


@lru_cache(maxsize=None)
def shift_allowed_mask(res: int, w: int, shift: int) -> torch.Tensor:
    """Boolean [nW, T, T]: key pairs that stay within one pre-shift region.

    After a cyclic shift the windows on the wrap-around border mix voxels
    from opposite volume edges; those pairs must not attend each other.
    """
    segs = (slice(0, res - w), slice(res - w, res - shift), slice(res - shift, res))
    region = torch.zeros(res, res, res)
    count = 0
    for sd in segs:
        for sh in segs:
            for sw in segs:
                region[sd, sh, sw] = count
                count += 1
    wins = window_partition(region[None, ..., None], w).squeeze(-1)  # [nW, T]
    return wins[:, :, None] == wins[:, None, :]


class WindowAttention3D(nn.Module):
    """Per-window multi-head attention with learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.num_heads = num_heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.relative_bias = nn.Parameter(
            torch.zeros((2 * window - 1) ** 3, num_heads))
        self.register_buffer("bias_index", _relative_index(window), persistent=False)

    def forward(self, windows: torch.Tensor,
                allowed: torch.Tensor | None = None) -> torch.Tensor:
        b_, t, c = windows.shape
        q, k, v = self.qkv(windows).chunk(3, dim=-1)
        q, k, v = (x.view(b_, t, self.num_heads, -1).transpose(1, 2) for x in (q, k, v))
        scale = q.shape[-1] ** -0.5
        logits = torch.matmul(q, k.transpose(-2, -1)) * scale
        bias = self.relative_bias[self.bias_index]  # [T, T, H]
        logits = logits + bias.permute(2, 0, 1).unsqueeze(0)
        if allowed is not None:
            nw = allowed.shape[0]
            logits = logits.view(b_ // nw, nw, self.num_heads, t, t)
            logits = logits.masked_fill(~allowed[None, :, None], float("-inf"))
            logits = logits.view(b_, self.num_heads, t, t)
        attn = torch.softmax(logits, dim=-1)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(b_, t, c)
        return self.proj(out)


class SwinBlock3D(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: int, shift: int,
                 resolution: int, ff_mult: int = 4):
        super().__init__()
        self.window = window
        self.shift = shift
        self.resolution = resolution
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, _ = x.shape
        y = self.norm1(x)
        allowed = None
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
            allowed = shift_allowed_mask(self.resolution, self.window,
                                         self.shift).to(x.device)
        y = self.attn(window_partition(y, self.window), allowed)
        y = window_reverse(y, self.window, b, d, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        x = x + y
        return x + self.ff(self.norm2(x))


class PatchMerging3D(nn.Module):
    """Concatenate 2x2x2 neighborhoods and project 8C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduce = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        x = x.view(b, d // 2, 2, h // 2, 2, w // 2, 2, c)
        x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, d // 2, h // 2, w // 2, 8 * c)
        return self.reduce(self.norm(x))


class SwinEncoder3D(nn.Module):
    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv3d(cfg.in_channels, cfg.embed_dim,
                                     kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.embed_norm = nn.LayerNorm(cfg.embed_dim)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(4):
            res = cfg.stage_resolution(i)
            w = cfg.effective_window(i)
            blocks = []
            for j in range(cfg.depths[i]):
                shift = (w // 2) if (j % 2 == 1 and w < res) else 0
                blocks.append(SwinBlock3D(cfg.stage_dim(i), cfg.num_heads[i],
                                          w, shift, res))
            self.stages.append(nn.ModuleList(blocks))
            if i < 3:
                self.merges.append(PatchMerging3D(cfg.stage_dim(i)))

    def encode_volume(self, vol: torch.Tensor) -> VisionPyramid:
        cfg = self.cfg
        expected = (cfg.in_channels,) + (cfg.input_size,) * 3
        if tuple(vol.shape[1:]) != expected:
            raise ShapeMismatch(f"volume shape {tuple(vol.shape[1:])} != {expected}")
        x = self.patch_embed(vol).permute(0, 2, 3, 4, 1)  # [N, D, H, W, C]
        x = self.embed_norm(x)
        outs = []
        for i in range(4):
            for block in self.stages[i]:
                x = block(x)
            outs.append(x.permute(0, 4, 1, 2, 3).contiguous())
            if i < 3:
                x = self.merges[i](x)
        f_bot, f_mid, f_top = outs[1], outs[2], outs[3]
        return VisionPyramid(f_bot=f_bot, f_mid=f_mid, f_top=f_top,
                             pooled_top=f_top.mean(dim=(2, 3, 4)))

    forward = encode_volume
