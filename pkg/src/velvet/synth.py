"""Synthetic scan/report pairs for desk-scale training and tests.

Each sample renders one to four geometric primitives (ellipsoid, box, tube)
into a cube on a gently ramped background, and pairs it with a templated
report: one sentence per primitive plus a closing summary sentence. The
pairing is fully determined by the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .reports import RawReport, Vocabulary
from .volumes import Volume, write_volume_dir

SIZES = {"small": 0.08, "medium": 0.13, "large": 0.19}
INTENSITIES = {"faint": (0.30, 0.45), "bright": (0.70, 0.95)}
ZONES_Y = {"upper": (0.15, 0.45), "lower": (0.55, 0.85)}
ZONES_X = {"left": (0.15, 0.45), "right": (0.55, 0.85)}
SHAPES = ("ellipsoid", "box", "tube")
COUNT_WORDS = ("one", "two", "three", "four")

VOCAB_BODY = (
    "there", "is", "a", "in", "the", "region", "scan", "shows", "total",
    "finding", "##s", "small", "medium", "large", "faint", "bright",
    "ellip", "##soid", "box", "tube", "upper", "lower", "left", "right",
    "one", "two", "three", "four",
)


def default_vocabulary(max_num_sent: int = 50) -> Vocabulary:
    """Vocabulary covering every word the report templates can emit.

    'ellipsoid' and 'findings' intentionally split into two pieces so
    multi-piece word spans occur in every synthetic corpus.
    """
    return Vocabulary(list(VOCAB_BODY), max_num_sent=max_num_sent)


@dataclass
class SynthSample:
    volume: Volume
    report: RawReport


@dataclass
class SynthDataset:
    samples: list[SynthSample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def volumes(self) -> list[Volume]:
        return [s.volume for s in self.samples]

    @property
    def reports(self) -> list[RawReport]:
        return [s.report for s in self.samples]


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand(1, generator=rng).item()


def _render_primitive(grid, rng: torch.Generator):
    """Draw one primitive; returns (inside mask, intensity, sentence)."""
    zc, yc, xc = grid
    shape = SHAPES[int(torch.randint(0, len(SHAPES), (1,), generator=rng))]
    size_word = list(SIZES)[int(torch.randint(0, len(SIZES), (1,), generator=rng))]
    int_word = list(INTENSITIES)[int(torch.randint(0, 2, (1,), generator=rng))]
    zone_y = list(ZONES_Y)[int(torch.randint(0, 2, (1,), generator=rng))]
    zone_x = list(ZONES_X)[int(torch.randint(0, 2, (1,), generator=rng))]

    base = SIZES[size_word]
    cy = _uniform(rng, *ZONES_Y[zone_y])
    cx = _uniform(rng, *ZONES_X[zone_x])
    cz = _uniform(rng, 0.2, 0.8)
    value = _uniform(rng, *INTENSITIES[int_word])
    jitter = [_uniform(rng, 0.8, 1.25) for _ in range(3)]

    if shape == "ellipsoid":
        az, ay, ax = (base * j for j in jitter)
        inside = (((zc - cz) / az) ** 2 + ((yc - cy) / ay) ** 2
                  + ((xc - cx) / ax) ** 2) <= 1.0
    elif shape == "box":
        hz, hy, hx = (base * j for j in jitter)
        inside = ((zc - cz).abs() <= hz) & ((yc - cy).abs() <= hy) \
            & ((xc - cx).abs() <= hx)
    else:  # tube along z
        radius = base * jitter[0]
        half_len = min(2.2 * base * jitter[1], 0.45)
        inside = ((((yc - cy) / radius) ** 2 + ((xc - cx) / radius) ** 2) <= 1.0) \
            & ((zc - cz).abs() <= half_len)

    sentence = (f"There is a {size_word} {int_word} {shape} "
                f"in the {zone_y} {zone_x} region")
    return inside, value, sentence


def _make_sample(idx: int, rng: torch.Generator, size: int) -> SynthSample:
    axes = [(torch.arange(size, dtype=torch.float32) + 0.5) / size] * 3
    grid = torch.meshgrid(*axes, indexing="ij")  # z, y, x

    # Ramped background gives the volume a stable orientation cue.
    vol = 0.02 + 0.10 * grid[2] + 0.02 * torch.rand(
        (size, size, size), generator=rng)
    n_prim = int(torch.randint(1, 5, (1,), generator=rng))
    sentences = []
    for _ in range(n_prim):
        inside, value, sentence = _render_primitive(grid, rng)
        vol = torch.where(inside, torch.maximum(vol, torch.tensor(value)), vol)
        sentences.append(sentence)
    count = COUNT_WORDS[n_prim - 1]
    noun = "finding" if n_prim == 1 else "findings"
    sentences.append(f"The scan shows {count} {noun} in total")
    text = ". ".join(sentences) + "."
    scan_id = f"synth_{idx:05d}"
    return SynthSample(
        volume=Volume(id=scan_id, data=vol.unsqueeze(0)),
        report=RawReport(id=scan_id, text=text),
    )


def synth_dataset(n: int, seed: int, size: int = 96) -> SynthDataset:
    """Generate ``n`` unique paired samples, deterministic in ``seed``.

    Samples whose report text collides with an earlier one are redrawn from
    a derived stream, so reports are pairwise distinct.
    """
    if n < 2:
        raise ValueError(f"need n >= 2 paired samples, got {n}")
    samples: list[SynthSample] = []
    seen: set[str] = set()
    for i in range(n):
        for attempt in range(1000):
            rng = torch.Generator().manual_seed(
                (seed * 1_000_003 + i * 1009 + attempt) % (2 ** 63))
            sample = _make_sample(i, rng, size)
            if sample.report.text not in seen:
                break
        else:
            raise RuntimeError("could not draw a unique report in 1000 attempts")
        seen.add(sample.report.text)
        samples.append(sample)
    return SynthDataset(samples)


def write_synth_dataset(ds: SynthDataset, out_dir, vocab: Vocabulary | None = None) -> None:
    """Write volumes as raw containers plus reports.jsonl and vocab.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sample in ds.samples:
        write_volume_dir(out / "volumes" / sample.volume.id, sample.volume.id,
                         sample.volume.data.squeeze(0).numpy())
    with open(out / "reports.jsonl", "w", encoding="utf-8") as fh:
        for sample in ds.samples:
            fh.write(json.dumps({"id": sample.report.id, "text": sample.report.text}) + "\n")
    (vocab or default_vocabulary()).save(out / "vocab.txt")
