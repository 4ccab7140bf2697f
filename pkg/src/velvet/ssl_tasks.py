"""Uni-modal self-supervision: masked language modeling on the text side;
masked volume inpainting, in-plane rotation prediction, and contrastive
coding on the vision side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .contrastive import cosine_matrix, info_nce
from .errors import BadBlockSize, BatchTooSmall, NoMaskedPositions, NonSquarePlane
from .tribert import ROLE_WORD, TriBatch

IGNORE_INDEX = -100

# Special ids fixed by the vocabulary layout.
_MASK_ID = 3


@dataclass
class MaskedTextBatch:
    """Corrupted token ids plus recovery labels.

    ``labels`` carry the original id at every drawn position and
    IGNORE_INDEX elsewhere; specials ([CLS], [SENT_i], [PAD]) are never
    drawn.
    """

    input_ids: torch.Tensor      # [N, L]
    labels: torch.Tensor         # [N, L]
    mask_positions: torch.Tensor  # [N, L] bool


def mask_tokens(batch: TriBatch, vocab_size: int, num_specials: int,
                rng: torch.Generator, ratio: float = 0.15) -> MaskedTextBatch:
    """BERT-style corruption of word positions at a fixed ratio.

    Per report, round(ratio * maskable) positions are drawn without
    replacement; of those, 80% become [MASK], 10% a random body token, and
    10% stay unchanged. All labels point at the original ids.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    input_ids = batch.token_ids.clone()
    labels = torch.full_like(input_ids, IGNORE_INDEX)
    positions = torch.zeros_like(input_ids, dtype=torch.bool)
    maskable = batch.role == ROLE_WORD
    for i in range(input_ids.shape[0]):
        cand = maskable[i].nonzero(as_tuple=True)[0]
        k = int(round(ratio * len(cand)))
        if k == 0:
            continue
        order = torch.randperm(len(cand), generator=rng)
        chosen = cand[order[:k]]
        labels[i, chosen] = input_ids[i, chosen]
        positions[i, chosen] = True
        action = torch.rand(k, generator=rng)
        replacements = torch.randint(num_specials, vocab_size, (k,), generator=rng)
        for j, pos in enumerate(chosen.tolist()):
            u = action[j].item()
            if u < 0.8:
                input_ids[i, pos] = _MASK_ID
            elif u < 0.9:
                input_ids[i, pos] = replacements[j]
    return MaskedTextBatch(input_ids=input_ids, labels=labels, mask_positions=positions)


def loss_mlm(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over labeled positions only."""
    if (labels != IGNORE_INDEX).sum() == 0:
        raise NoMaskedPositions("no labeled position in batch")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
                           ignore_index=IGNORE_INDEX)


@dataclass
class InpaintingTask:
    corrupted: torch.Tensor  # [N, 1, V, V, V]
    drop_mask: torch.Tensor  # [N, 1, V, V, V] bool, True = dropped
    original: torch.Tensor


def make_inpainting(vol: torch.Tensor, rng: torch.Generator, block: int = 16,
                    rate: float = 0.3) -> InpaintingTask:
    """Zero random cubic blocks until at least ``rate`` of voxels are dropped.

    The dropped fraction overshoots ``rate`` by less than one block quantum.
    """
    size = vol.shape[-1]
    if size % block:
        raise BadBlockSize(f"block {block} does not divide volume {size}")
    per_axis = size // block
    n_blocks = per_axis ** 3
    n_drop = math.ceil(rate * n_blocks)
    mask = torch.zeros((vol.shape[0], n_blocks), dtype=torch.bool)
    for i in range(vol.shape[0]):
        order = torch.randperm(n_blocks, generator=rng)
        mask[i, order[:n_drop]] = True
    mask = mask.view(vol.shape[0], 1, per_axis, per_axis, per_axis)
    mask = mask.repeat_interleave(block, 2).repeat_interleave(block, 3) \
               .repeat_interleave(block, 4)
    return InpaintingTask(corrupted=vol * ~mask, drop_mask=mask, original=vol)


def loss_inp(recon: torch.Tensor, task: InpaintingTask) -> torch.Tensor:
    """MSE restricted to dropped voxels."""
    mask = task.drop_mask.to(recon.dtype)
    return (((recon - task.original) ** 2) * mask).sum() / mask.sum()


@dataclass
class RotationTask:
    rotated: torch.Tensor  # [N, 1, V, V, V]
    labels: torch.Tensor   # [N] in {0, 1, 2, 3}


def rotate_xy(vol: torch.Tensor, k: int) -> torch.Tensor:
    """k * 90 degree rotation in the x-y plane (a pure voxel permutation)."""
    if vol.shape[-1] != vol.shape[-2]:
        raise NonSquarePlane(f"x/y extents differ: {vol.shape[-2]} vs {vol.shape[-1]}")
    return torch.rot90(vol, k, dims=(-2, -1))


def make_rotation(vol: torch.Tensor, rng: torch.Generator) -> RotationTask:
    ks = torch.randint(0, 4, (vol.shape[0],), generator=rng)
    rotated = torch.stack([rotate_xy(vol[i], int(ks[i])) for i in range(vol.shape[0])])
    return RotationTask(rotated=rotated, labels=ks)


def loss_rot(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def loss_con(z1: torch.Tensor, z2: torch.Tensor,
             tau: torch.Tensor | float) -> torch.Tensor:
    """Symmetric InfoNCE between projections of two augmented views."""
    if z1.shape[0] < 2:
        raise BatchTooSmall(f"contrastive coding needs N >= 2, got {z1.shape[0]}")
    return info_nce(cosine_matrix(z1, z2), tau)


class InpaintingDecoder(nn.Module):
    """Shallow transposed-conv stack recovering the volume from the top map.

    Four stride-2 upsamplings undo the patch embedding and three merges
    (16x total), followed by a 1x1 projection to one channel.
    """

    def __init__(self, c_top: int):
        super().__init__()
        chans = [c_top, max(c_top // 2, 8), max(c_top // 4, 8), max(c_top // 8, 8)]
        ups = []
        for cin, cout in zip(chans, chans[1:] + [chans[-1]]):
            ups.append(nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=2))
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv3d(chans[-1], 1, kernel_size=1)

    def forward(self, f_top: torch.Tensor) -> torch.Tensor:
        x = f_top
        for up in self.ups:
            x = F.gelu(up(x))
        return self.out(x)


class ContrastiveProjector(nn.Module):
    """Two-layer MLP from pooled top features into the contrastive space."""

    def __init__(self, c_top: int, dim: int = 512):
        super().__init__()
        self.fc1 = nn.Linear(c_top, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(pooled)))
