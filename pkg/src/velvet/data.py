"""Loading paired volume/report data from a dataset directory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .reports import (TextCaps, TokenizedReport, Vocabulary,
                      read_reports_jsonl, segment_report, tokenize)
from .volumes import list_volume_dirs, read_volume_dir


@dataclass
class PairedDataset:
    ids: list[str]
    volumes: list[torch.Tensor]        # each [1, V, V, V]
    reports: list[TokenizedReport]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, indices) -> "PairedDataset":
        return PairedDataset(
            ids=[self.ids[i] for i in indices],
            volumes=[self.volumes[i] for i in indices],
            reports=[self.reports[i] for i in indices],
            vocab=self.vocab,
        )


def load_paired_dataset(data_dir, caps: TextCaps = TextCaps(),
                        vocab: Vocabulary | None = None) -> PairedDataset:
    """Read a directory produced by the synth/prep commands.

    Expects ``volumes/<id>/`` containers, ``reports.jsonl``, and (unless a
    vocabulary is supplied) ``vocab.txt``. Pairs are matched by id; scans
    without a report are skipped.
    """
    data_dir = Path(data_dir)
    if vocab is None:
        vocab = Vocabulary.load(data_dir / "vocab.txt")
    raw_reports = {r.id: r for r in read_reports_jsonl(data_dir / "reports.jsonl")}
    ids, volumes, reports = [], [], []
    for scan_dir in list_volume_dirs(data_dir / "volumes"):
        rec = read_volume_dir(scan_dir)
        raw = raw_reports.get(rec.id)
        if raw is None:
            continue
        sentences = segment_report(raw.text)
        reports.append(tokenize(sentences, vocab, caps=caps, report_id=rec.id))
        volumes.append(torch.from_numpy(rec.slices).unsqueeze(0))
        ids.append(rec.id)
    if not ids:
        raise ValueError(f"{data_dir}: no paired scan/report samples found")
    return PairedDataset(ids=ids, volumes=volumes, reports=reports, vocab=vocab)
