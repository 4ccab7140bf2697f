"""The full pre-training model: both encoders plus every objective head."""

from __future__ import annotations

import torch
import torch.nn as nn

from .contrastive import ProjectionHeads, Temperatures
from .fusion import MultiModalConfig, MultiModalEncoder
from .layers import init_weights
from .ssl_tasks import ContrastiveProjector, InpaintingDecoder
from .swin3d import SwinEncoder3D, VisionConfig
from .tribert import TriBertConfig, TriBertEncoder


class VelvetModel(nn.Module):
    """Text encoder, vision encoder, projection heads, fusion stack, and the
    vision SSL heads, initialized reproducibly from a seed.

    The matching head starts at exactly zero so an untrained model scores
    ln 2 on the matching objective.
    """

    def __init__(self, text_cfg: TriBertConfig, vision_cfg: VisionConfig,
                 proj_dim: int = 512, bot_token_cap: int = 512,
                 mm_layers: int = 3, mm_heads: int = 4,
                 mm_memory_level: str = "top", temperature_init: float = 0.07,
                 seed: int = 0):
        super().__init__()
        self.text_cfg = text_cfg
        self.vision_cfg = vision_cfg
        self.mm_memory_level = mm_memory_level
        memory_dim = (vision_cfg.top_dim if mm_memory_level == "top"
                      else vision_cfg.stage_dim(2))

        self.text = TriBertEncoder(text_cfg)
        self.vision = SwinEncoder3D(vision_cfg)
        self.proj = ProjectionHeads(
            c_v_bot=vision_cfg.stage_dim(1), c_v_mid=vision_cfg.stage_dim(2),
            c_v_top=vision_cfg.top_dim, c_t=text_cfg.feature_dim,
            dim=proj_dim, bot_token_cap=bot_token_cap)
        self.temps = Temperatures(init=temperature_init)
        self.mm = MultiModalEncoder(MultiModalConfig(
            dim=text_cfg.feature_dim, memory_dim=memory_dim,
            num_layers=mm_layers, num_heads=mm_heads))
        self.inpaint_head = InpaintingDecoder(vision_cfg.top_dim)
        self.rot_head = nn.Linear(vision_cfg.top_dim, 4)
        self.con_proj = ContrastiveProjector(vision_cfg.top_dim, proj_dim)

        init_weights(self, torch.Generator().manual_seed(seed))
        with torch.no_grad():
            self.mm.match_head.weight.zero_()
            self.mm.match_head.bias.zero_()

    def vision_memory(self, pyramid) -> torch.Tensor:
        return pyramid.tokens(self.mm_memory_level)

    def scan_embeddings(self, pyramid) -> torch.Tensor:
        """Retrieval-side scan embedding: projected pooled top features."""
        return self.proj.v_top(pyramid.pooled_top)

    def report_embeddings(self, text_features) -> torch.Tensor:
        """Retrieval-side report embedding: projected [CLS] state."""
        return self.proj.t_rep(text_features.f_t_rep)
