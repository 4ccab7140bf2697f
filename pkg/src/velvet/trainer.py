"""Composite-objective training loop.

All stochastic choices (batch order, the two text mask draws, augmentation,
rotation labels, inpainting blocks, negative mining) come from named
generator streams derived from the run seed, and every stream's state is
checkpointed, so a resumed run reproduces the uninterrupted loss trace
bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import LOSS_NAMES, RunConfig, cosine_lr
from .contrastive import cosine_matrix, loss_cm
from .data import PairedDataset
from .errors import MissingComponent, NonFiniteLoss
from .fusion import loss_match, loss_mm_mlm, mine_hard_negatives
from .model import VelvetModel
from .reports import TextCaps, Vocabulary
from .retrieval import embed_pairs, eval_retrieval
from .ssl_tasks import (loss_con, loss_inp, loss_mlm, loss_rot,
                        make_inpainting, make_rotation, mask_tokens)
from .swin3d import VisionConfig
from .tribert import TriBertConfig, build_tri_batch
from .volumes import AugmentConfig, Volume, extract_subvolume

STREAM_NAMES = ("data", "split", "mask_uni", "mask_mm", "augment",
                "rotation", "inpaint", "mining")


@dataclass
class LossBundle:
    """Per-step named loss scalars; disabled components are exactly 0."""

    components: dict[str, float]
    total: float


class RngStreams:
    def __init__(self, seed: int):
        self.generators = {
            name: torch.Generator().manual_seed(seed + 1000 * (i + 1))
            for i, name in enumerate(STREAM_NAMES)}

    def __getitem__(self, name: str) -> torch.Generator:
        return self.generators[name]

    def state_dict(self) -> dict:
        return {k: g.get_state().numpy() for k, g in self.generators.items()}

    def load_state_dict(self, states: dict) -> None:
        for k, g in self.generators.items():
            g.set_state(torch.from_numpy(np.ascontiguousarray(states[k])))


def composite_loss(components: dict[str, torch.Tensor], cfg: RunConfig):
    """Weighted sum of the enabled components (unit weights by default).

    Returns (total tensor, LossBundle). Raises MissingComponent when a flag
    is enabled but its value was never computed, and NonFiniteLoss when any
    component leaves the reals.
    """
    total = None
    logged = {}
    for name in LOSS_NAMES:
        if not cfg.enabled(name):
            logged[name] = 0.0
            continue
        if name not in components:
            raise MissingComponent(f"loss {name!r} enabled but not computed")
        value = components[name]
        if not torch.isfinite(value):
            raise NonFiniteLoss(f"loss {name!r} is not finite",
                                {k: float(v.detach()) for k, v in components.items()})
        logged[name] = float(value.detach())
        term = cfg.weight(name) * value
        total = term if total is None else total + term
    if total is None:
        total = torch.tensor(0.0)
    return total, LossBundle(components=logged, total=float(total.detach()))


def build_model(cfg: RunConfig, vocab_size: int) -> VelvetModel:
    text_cfg = TriBertConfig.preset(
        cfg.text_preset, max_num_sent=cfg.max_sentences, max_len=cfg.max_len,
        vocab_size=vocab_size)
    vision_cfg = VisionConfig.preset(
        cfg.vision_preset, window_size=cfg.window_size, input_size=cfg.volume_size)
    return VelvetModel(
        text_cfg, vision_cfg, proj_dim=cfg.proj_dim,
        bot_token_cap=cfg.bot_token_cap, mm_layers=cfg.mm_layers,
        mm_heads=cfg.mm_heads, mm_memory_level=cfg.mm_memory_level,
        temperature_init=cfg.temperature_init, seed=cfg.seed)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: PairedDataset,
                 metrics_path=None):
        cfg.validate()
        if cfg.data_parallel:
            warnings.warn("data_parallel requested; this desk-scale build "
                          "runs single-process and ignores the flag")
        self.cfg = cfg
        self.dataset = dataset
        self.model = build_model(cfg, vocab_size=len(dataset.vocab))
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
            weight_decay=cfg.weight_decay)
        self.rng = RngStreams(cfg.seed)
        self.aug_cfg = AugmentConfig(
            crop_size=cfg.crop_size, intensity_shift=cfg.intensity_shift,
            intensity_scale=cfg.intensity_scale, flip_prob=cfg.flip_prob)

        n_val = int(round(cfg.val_fraction * len(dataset)))
        order = torch.randperm(len(dataset), generator=self.rng["split"])
        self.val_indices = order[:n_val].tolist()
        self.train_indices = order[n_val:].tolist()

        self.step = 0
        self.epoch = 0
        self.cursor = 0
        self.perm = self._draw_perm()
        self.best_val = math.inf

        self.metrics_path = Path(metrics_path) if metrics_path else None
        self._metrics_header_written = (
            self.metrics_path.exists() if self.metrics_path else False)

    # --- schedule/bookkeeping ---

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.train_indices) / self.cfg.batch_size))

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps > 0:
            return self.cfg.max_steps
        return max(1, self.cfg.epochs * self.steps_per_epoch)

    def _draw_perm(self) -> list[int]:
        order = torch.randperm(len(self.train_indices), generator=self.rng["data"])
        return [self.train_indices[i] for i in order.tolist()]

    def _next_batch(self) -> list[int]:
        while True:
            if self.cursor >= len(self.perm):
                self.epoch += 1
                self.perm = self._draw_perm()
                self.cursor = 0
            idx = self.perm[self.cursor:self.cursor + self.cfg.batch_size]
            self.cursor += self.cfg.batch_size
            if len(idx) >= 2 or len(self.train_indices) < 2:
                return idx
            # an orphan tail sample cannot feed the pairwise objectives

    # --- forward ---

    def compute_losses(self, indices: list[int],
                       rng: RngStreams | None = None) -> dict[str, torch.Tensor]:
        cfg, model = self.cfg, self.model
        rng = rng or self.rng
        vols = torch.stack([self.dataset.volumes[i] for i in indices])
        reports = [self.dataset.reports[i] for i in indices]
        tri = build_tri_batch(reports, model.text_cfg)
        losses: dict[str, torch.Tensor] = {}

        cm_levels = tuple(l for l in ("top", "mid", "bot")
                          if cfg.enabled(f"cm_{l}"))
        need_mm = cfg.enabled("mm_match") or cfg.enabled("mm_mlm")
        need_pair = bool(cm_levels) or need_mm

        pyramid = text_feats = None
        if need_pair:
            pyramid = model.vision.encode_volume(vols)
            text_feats = model.text.encode(tri)

        if cm_levels:
            emb = model.proj(pyramid, text_feats)
            _, comps = loss_cm(emb, model.temps, cm_levels, cfg.local_aggregation)
            losses.update(comps)

        if cfg.enabled("lan_mlm"):
            masked = mask_tokens(tri, len(self.dataset.vocab),
                                 self.dataset.vocab.num_specials,
                                 rng["mask_uni"], cfg.mask_ratio)
            tri_uni = dataclasses.replace(tri, token_ids=masked.input_ids)
            states = model.text.encode(tri_uni).token_states
            losses["lan_mlm"] = loss_mlm(model.text.mlm_logits(states), masked.labels)

        if need_mm:
            memory = model.vision_memory(pyramid)
            if cfg.enabled("mm_match"):
                sim = cosine_matrix(model.scan_embeddings(pyramid),
                                    model.report_embeddings(text_feats))
                neg_rows, neg_cols = mine_hard_negatives(sim, rng["mining"])
                if cfg.mine_both_directions:
                    scan_idx = list(range(len(indices))) + neg_cols.tolist()
                    text_idx = neg_rows.tolist() + list(range(len(indices)))
                elif self.step % 2 == 0:
                    scan_idx, text_idx = list(range(len(indices))), neg_rows.tolist()
                else:
                    scan_idx, text_idx = neg_cols.tolist(), list(range(len(indices)))
                fused_pos = model.mm(text_feats.token_states, tri.attn_mask, memory)
                fused_neg = model.mm(text_feats.token_states[text_idx],
                                     tri.attn_mask[text_idx], memory[scan_idx])
                logits = torch.cat([model.mm.match_logits(fused_pos),
                                    model.mm.match_logits(fused_neg)])
                labels = torch.cat([torch.ones(len(indices)),
                                    torch.zeros(len(scan_idx))])
                losses["mm_match"] = loss_match(logits, labels)
            if cfg.enabled("mm_mlm"):
                masked = mask_tokens(tri, len(self.dataset.vocab),
                                     self.dataset.vocab.num_specials,
                                     rng["mask_mm"], cfg.mask_ratio)
                tri_mm = dataclasses.replace(tri, token_ids=masked.input_ids)
                fused = model.mm(model.text.encode(tri_mm).token_states,
                                 tri.attn_mask, memory)
                losses["mm_mlm"] = loss_mm_mlm(model.text.mlm_logits(fused),
                                               masked.labels)

        if cfg.enabled("vis_inp") or cfg.enabled("vis_rot") or cfg.enabled("vis_con"):
            views = []
            for _ in range(2):
                view = torch.stack([
                    extract_subvolume(Volume(self.dataset.ids[i],
                                             self.dataset.volumes[i]),
                                      rng["augment"], self.aug_cfg)
                    for i in indices])
                views.append(view)
            rot_tasks = inp_tasks = None
            if cfg.enabled("vis_rot"):
                rot_tasks = [make_rotation(v, rng["rotation"]) for v in views]
                views = [t.rotated for t in rot_tasks]
            if cfg.enabled("vis_inp"):
                inp_tasks = [make_inpainting(v, rng["inpaint"], cfg.inpaint_block,
                                             cfg.inpaint_rate) for v in views]
                views = [t.corrupted for t in inp_tasks]
            pyramids = [model.vision.encode_volume(v) for v in views]
            if cfg.enabled("vis_rot"):
                losses["vis_rot"] = 0.5 * sum(
                    loss_rot(model.rot_head(p.pooled_top), t.labels)
                    for p, t in zip(pyramids, rot_tasks))
            if cfg.enabled("vis_inp"):
                losses["vis_inp"] = 0.5 * sum(
                    loss_inp(model.inpaint_head(p.f_top), t)
                    for p, t in zip(pyramids, inp_tasks))
            if cfg.enabled("vis_con"):
                losses["vis_con"] = loss_con(
                    model.con_proj(pyramids[0].pooled_top),
                    model.con_proj(pyramids[1].pooled_top),
                    model.temps.tau("con"))
        return losses

    # --- optimization ---

    def train_step(self) -> LossBundle:
        indices = self._next_batch()
        if self.cfg.amp and torch.cuda.is_available():
            with torch.autocast("cuda"):
                components = self.compute_losses(indices)
        else:
            components = self.compute_losses(indices)
        total, bundle = composite_loss(components, self.cfg)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        lr = cosine_lr(self.step, self.total_steps, self.cfg.lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.step += 1
        self._log_metrics(bundle, lr)
        return bundle

    def _log_metrics(self, bundle: LossBundle, lr: float) -> None:
        if self.metrics_path is None:
            return
        enabled = self.cfg.enabled_losses
        with open(self.metrics_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if not self._metrics_header_written:
                writer.writerow(["step", *enabled, "total", "lr"])
                self._metrics_header_written = True
            writer.writerow([self.step, *(bundle.components[n] for n in enabled),
                             bundle.total, lr])

    @torch.no_grad()
    def validation_loss(self) -> float:
        """Mean total loss over the held-out split with a fixed eval stream."""
        if not self.val_indices:
            return math.nan
        rng = RngStreams(self.cfg.seed + 7919)
        totals = []
        for start in range(0, len(self.val_indices), self.cfg.batch_size):
            idx = self.val_indices[start:start + self.cfg.batch_size]
            if len(idx) < 2 and len(self.val_indices) >= 2:
                continue
            total, _ = composite_loss(self.compute_losses(idx, rng), self.cfg)
            totals.append(float(total))
        return float(np.mean(totals)) if totals else math.nan

    def eval_retrieval(self, indices=None, ks=(1, 5, 10)):
        idx = list(indices) if indices is not None else list(range(len(self.dataset)))
        scans, texts = embed_pairs(self.model,
                                   [self.dataset.volumes[i] for i in idx],
                                   [self.dataset.reports[i] for i in idx])
        return eval_retrieval(scans, texts, ks=ks)

    def run(self, num_steps: int | None = None, ckpt_dir=None) -> list[LossBundle]:
        """Train for ``num_steps`` (default: the full schedule), keeping
        last/best checkpoints when a directory is given."""
        target = self.step + num_steps if num_steps else self.total_steps
        ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        if ckpt_dir:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        bundles = []
        last_epoch = self.epoch
        while self.step < target:
            bundles.append(self.train_step())
            if ckpt_dir and self.epoch != last_epoch:
                last_epoch = self.epoch
                self._epoch_end(ckpt_dir)
        if ckpt_dir:
            self.save(ckpt_dir / "last.ckpt")
        return bundles

    def _epoch_end(self, ckpt_dir: Path) -> None:
        val = self.validation_loss()
        if not math.isnan(val) and val < self.best_val:
            self.best_val = val
            self.save(ckpt_dir / "best.ckpt")
        self.save(ckpt_dir / "last.ckpt")

    # --- persistence ---

    def state_payload(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "vocab_body": list(self.dataset.vocab.tokens[self.dataset.vocab.num_specials:]),
            "vocab_max_num_sent": self.dataset.vocab.max_num_sent,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "perm": np.asarray(self.perm, dtype=np.int64),
            "train_indices": np.asarray(self.train_indices, dtype=np.int64),
            "val_indices": np.asarray(self.val_indices, dtype=np.int64),
            "rng": self.rng.state_dict(),
            "best_val": self.best_val,
        }

    def save(self, path) -> None:
        save_checkpoint(self.state_payload(), path)

    def load_payload(self, payload: dict) -> None:
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.step = int(payload["step"])
        self.epoch = int(payload["epoch"])
        self.cursor = int(payload["cursor"])
        self.perm = [int(i) for i in payload["perm"]]
        self.train_indices = [int(i) for i in payload["train_indices"]]
        self.val_indices = [int(i) for i in payload["val_indices"]]
        self.rng.load_state_dict(payload["rng"])
        self.best_val = float(payload["best_val"])

    @classmethod
    def from_checkpoint(cls, path, dataset: PairedDataset,
                        metrics_path=None) -> "Trainer":
        payload = load_checkpoint(path)
        cfg = RunConfig.from_dict(payload["config"])
        trainer = cls(cfg, dataset, metrics_path=metrics_path)
        trainer.load_payload(payload)
        return trainer


def checkpoint_vocabulary(payload: dict) -> Vocabulary:
    return Vocabulary(list(payload["vocab_body"]),
                      max_num_sent=int(payload["vocab_max_num_sent"]))


def checkpoint_model(payload: dict) -> VelvetModel:
    cfg = RunConfig.from_dict(payload["config"])
    model = build_model(cfg, vocab_size=4 + int(payload["vocab_max_num_sent"])
                        + len(payload["vocab_body"]))
    model.load_state_dict(payload["model"])
    return model


def text_caps(cfg: RunConfig) -> TextCaps:
    return TextCaps(max_sentences=cfg.max_sentences,
                    max_words_per_sentence=cfg.max_words_per_sentence,
                    max_words_per_report=cfg.max_words_per_report)


def dump_diagnostics(path, exc: NonFiniteLoss, step: int) -> None:
    Path(path).write_text(json.dumps(
        {"step": step, "error": str(exc), "components": exc.components}, indent=2))
