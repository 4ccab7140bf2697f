"""Cross-modal retrieval evaluation by dot-product ranking."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .tribert import build_tri_batch


@dataclass
class RetrievalReport:
    """Recall@K for scan->report (SRR) and report->scan (RSR)."""

    srr: dict[int, float] = field(default_factory=dict)
    rsr: dict[int, float] = field(default_factory=dict)
    sim_hash: str = ""

    def as_rows(self):
        ks = sorted(self.srr)
        return [("SRR", [self.srr[k] for k in ks]),
                ("RSR", [self.rsr[k] for k in ks])]


def _ranks_of_truth(sim: np.ndarray) -> np.ndarray:
    """Rank (0-based) of the true match per row under descending-similarity
    ordering; ties resolve in favor of the lower candidate index."""
    n = sim.shape[0]
    truth = sim[np.arange(n), np.arange(n)][:, None]
    better = (sim > truth).sum(axis=1)
    idx = np.arange(n)[None, :]
    tie_ahead = ((sim == truth) & (idx < np.arange(n)[:, None])).sum(axis=1)
    return better + tie_ahead


def eval_retrieval(scan_emb: torch.Tensor, report_emb: torch.Tensor,
                   ks: tuple[int, ...] = (1, 5, 10)) -> RetrievalReport:
    """Recall@K by dot product, both directions; pair i matches pair i."""
    sim = (scan_emb @ report_emb.T).detach().cpu().numpy().astype(np.float32)
    srr_ranks = _ranks_of_truth(sim)
    rsr_ranks = _ranks_of_truth(sim.T)
    return RetrievalReport(
        srr={k: float((srr_ranks < k).mean()) for k in ks},
        rsr={k: float((rsr_ranks < k).mean()) for k in ks},
        sim_hash=hashlib.sha256(np.ascontiguousarray(sim).tobytes()).hexdigest(),
    )


@torch.no_grad()
def embed_pairs(model, volumes: list[torch.Tensor], reports,
                batch_size: int = 16):
    """L2-normalized retrieval embeddings for a list of paired samples."""
    model.eval()
    scan_chunks, report_chunks = [], []
    for start in range(0, len(volumes), batch_size):
        vols = torch.stack(volumes[start:start + batch_size])
        pyramid = model.vision.encode_volume(vols)
        scan_chunks.append(model.scan_embeddings(pyramid))
        tri = build_tri_batch(reports[start:start + batch_size], model.text_cfg)
        feats = model.text.encode(tri)
        report_chunks.append(model.report_embeddings(feats))
    model.train()
    return (F.normalize(torch.cat(scan_chunks), dim=-1),
            F.normalize(torch.cat(report_chunks), dim=-1))
