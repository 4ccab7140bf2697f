"""Report text preparation: sentence segmentation, WordPiece tokenization,
and corpus statistics.

All functions here are pure; reports can be processed in parallel workers
without shared state.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCorpus, EmptyReport

# Sentence-final punctuation plus newline runs. The clinical source material
# only guarantees "punctuation and line breaks"; this fixed set keeps
# segmentation deterministic.
_SENTENCE_SPLIT = re.compile(r"[.!?;]+|\n+")

SPECIAL_PAD = "[PAD]"
SPECIAL_UNK = "[UNK]"
SPECIAL_CLS = "[CLS]"
SPECIAL_MASK = "[MASK]"


@dataclass(frozen=True)
class RawReport:
    id: str
    text: str


@dataclass(frozen=True)
class TextCaps:
    """Hard length limits applied during tokenization."""

    max_sentences: int = 50
    max_words_per_sentence: int = 200
    max_words_per_report: int = 512


def segment_report(text: str) -> list[str]:
    """Split a report into sentences.

    Splits on {., !, ?, ;} and newline runs, trims whitespace, and drops
    fragments with fewer than two whitespace-delimited words. Raises
    EmptyReport if nothing survives.
    """
    sentences = []
    for part in _SENTENCE_SPLIT.split(text):
        part = " ".join(part.split())
        if len(part.split()) >= 2:
            sentences.append(part)
    if not sentences:
        raise EmptyReport("no sentence with >= 2 words after segmentation")
    return sentences


class Vocabulary:
    """WordPiece vocabulary with fixed specials.

    Token ids follow file order: [PAD], [UNK], [CLS], [MASK], then one
    sentence marker per allowed sentence ([SENT_1] .. [SENT_max]), then body
    pieces. Continuation pieces carry a ``##`` prefix.
    """

    def __init__(self, body_tokens: list[str], max_num_sent: int = 50):
        self.max_num_sent = max_num_sent
        sent_tokens = [f"[SENT_{i}]" for i in range(1, max_num_sent + 1)]
        self.specials = [SPECIAL_PAD, SPECIAL_UNK, SPECIAL_CLS, SPECIAL_MASK] + sent_tokens
        for tok in body_tokens:
            if tok in self.specials:
                raise ValueError(f"body token collides with special: {tok}")
        self.tokens = self.specials + list(body_tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def mask_id(self) -> int:
        return 3

    def sent_id(self, i: int) -> int:
        """Id of the marker token for sentence ``i`` (1-based)."""
        if not 1 <= i <= self.max_num_sent:
            raise ValueError(f"sentence index {i} out of range 1..{self.max_num_sent}")
        return 3 + i

    @property
    def num_specials(self) -> int:
        return 4 + self.max_num_sent

    def is_special(self, token_id: int) -> bool:
        return token_id < self.num_specials

    @property
    def body_ids(self) -> range:
        return range(self.num_specials, len(self.tokens))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        expected_head = [SPECIAL_PAD, SPECIAL_UNK, SPECIAL_CLS, SPECIAL_MASK]
        if tokens[:4] != expected_head:
            raise ValueError(f"vocabulary file must start with {expected_head}")
        n_sent = 0
        while 4 + n_sent < len(tokens) and tokens[4 + n_sent] == f"[SENT_{n_sent + 1}]":
            n_sent += 1
        if n_sent == 0:
            raise ValueError("vocabulary file carries no [SENT_i] specials")
        return cls(tokens[4 + n_sent:], max_num_sent=n_sent)


@dataclass
class TokenizedReport:
    """Sub-word token ids with word- and sentence-boundary bookkeeping.

    ``word_spans`` are half-open (start, end) ranges over token positions,
    one per retained source word; ``sentence_spans`` are half-open ranges
    over word indices.
    """

    token_ids: list[int]
    word_spans: list[tuple[int, int]]
    sentence_spans: list[tuple[int, int]]
    id: str = ""

    @property
    def num_words(self) -> int:
        return len(self.word_spans)

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_spans)

    def sentence_word_counts(self) -> list[int]:
        return [e - s for s, e in self.sentence_spans]


def wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first sub-word split of one lowercased word.

    A word with any unmatchable remainder maps to a single [UNK].
    """
    word = word.lower()
    pieces: list[int] = []
    pos = 0
    while pos < len(word):
        end = len(word)
        found = None
        while end > pos:
            cand = word[pos:end] if pos == 0 else "##" + word[pos:end]
            tid = vocab.index.get(cand)
            if tid is not None and not vocab.is_special(tid):
                found = tid
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        pieces.append(found)
        pos = end
    return pieces


def tokenize(sentences: list[str], vocab: Vocabulary,
             caps: TextCaps = TextCaps(), report_id: str = "") -> TokenizedReport:
    """Tokenize segmented sentences into a TokenizedReport.

    Truncation drops trailing sentences first, then trailing words, and
    never splits a word span.
    """
    kept = sentences[: caps.max_sentences]
    token_ids: list[int] = []
    word_spans: list[tuple[int, int]] = []
    sentence_spans: list[tuple[int, int]] = []
    total_words = 0
    for sent in kept:
        words = sent.split()[: caps.max_words_per_sentence]
        room = caps.max_words_per_report - total_words
        if room <= 0:
            break
        words = words[:room]
        start_word = len(word_spans)
        for word in words:
            piece_ids = wordpiece(word, vocab)
            word_spans.append((len(token_ids), len(token_ids) + len(piece_ids)))
            token_ids.extend(piece_ids)
        sentence_spans.append((start_word, len(word_spans)))
        total_words += len(words)
    return TokenizedReport(token_ids, word_spans, sentence_spans, id=report_id)


def detokenize(report: TokenizedReport, vocab: Vocabulary) -> list[str]:
    """Recover the word strings of a tokenized report (lowercased form)."""
    words = []
    for start, end in report.word_spans:
        parts = [vocab.tokens[t] for t in report.token_ids[start:end]]
        words.append("".join(p[2:] if p.startswith("##") else p for p in parts))
    return words


def read_reports_jsonl(path) -> list[RawReport]:
    """Load reports from a JSONL file with ``id`` and ``text`` fields."""
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                reports.append(RawReport(id=str(obj["id"]), text=str(obj["text"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad report record: {exc}") from exc
    return reports


# --- corpus statistics ---

STATS_ROWS = [
    "# of words",
    "# of sentences",
    "max length of sentence",
    "min length of sentence",
    "mean length of sentence",
    "median length of sentence",
]
STATS_COLS = ["max", "min", "mean", "25% quartiles", "median", "75% quartiles"]


@dataclass
class StatsTable:
    """Corpus summary laid out as rows x {max,min,mean,25%,median,75%}."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + STATS_COLS)
            for name in STATS_ROWS:
                writer.writerow([name] + [self.rows[name][c] for c in STATS_COLS])


def _summarize(values: np.ndarray) -> dict[str, float]:
    q25, q50, q75 = np.quantile(values, [0.25, 0.5, 0.75])
    return {
        "max": float(values.max()),
        "min": float(values.min()),
        "mean": float(values.mean()),
        "25% quartiles": float(q25),
        "median": float(q50),
        "75% quartiles": float(q75),
    }


def corpus_stats(reports: list[TokenizedReport]) -> StatsTable:
    """Word/sentence count statistics over a tokenized corpus."""
    if not reports:
        raise EmptyCorpus("statistics need at least one report")
    per_report = {name: [] for name in STATS_ROWS}
    for rep in reports:
        lengths = np.asarray(rep.sentence_word_counts(), dtype=np.float64)
        per_report["# of words"].append(lengths.sum())
        per_report["# of sentences"].append(len(lengths))
        per_report["max length of sentence"].append(lengths.max())
        per_report["min length of sentence"].append(lengths.min())
        per_report["mean length of sentence"].append(lengths.mean())
        per_report["median length of sentence"].append(float(np.median(lengths)))
    return StatsTable({
        name: _summarize(np.asarray(vals, dtype=np.float64))
        for name, vals in per_report.items()
    })
