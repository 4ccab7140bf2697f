"""Sentence-aware text encoder.

Input sequences are laid out as [CLS] then, per sentence i, a [SENT_i]
marker followed by that sentence's sub-word tokens. A tri-level attention
mask lets [CLS] and word tokens see the full context while each [SENT_i]
sees only [CLS], itself, and its own words, which keeps sentence embeddings
free of inter-sentence leakage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import CapExceeded, ShapeMismatch
from .layers import FeedForward, MaskedSelfAttention
from .reports import TokenizedReport

ROLE_CLS = 0
ROLE_SENT = 1
ROLE_WORD = 2
ROLE_PAD = 3

# Special token ids fixed by the vocabulary file layout.
_PAD_ID = 0
_CLS_ID = 2


def _sent_token_id(i: int) -> int:
    return 3 + i


@dataclass(frozen=True)
class TriBertConfig:
    feature_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    max_num_sent: int = 50
    max_len: int = 1024
    vocab_size: int = 30522

    def __post_init__(self):
        if self.feature_dim % self.num_heads:
            raise ValueError("feature_dim must be divisible by num_heads")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TriBertConfig":
        presets = {
            "tribert-s": dict(feature_dim=768, num_layers=6, num_heads=12),
            "tribert-b": dict(feature_dim=768, num_layers=12, num_heads=12),
            "tiny": dict(feature_dim=32, num_layers=2, num_heads=4, max_len=256),
        }
        if name not in presets:
            raise ValueError(f"unknown text preset {name!r}; have {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass
class TriBatch:
    """Batched encoder input plus the bookkeeping needed to read features back.

    ``sent_positions``/``word_start``/``word_end`` index into the padded
    token axis; validity masks mark real entries. ``sent_index`` tags every
    position with its 1-based sentence number (0 for [CLS] and padding).
    """

    token_ids: torch.Tensor        # [N, L] long
    sentence_type_ids: torch.Tensor  # [N, L] long, 0 for [CLS]
    position_ids: torch.Tensor    # [N, L] long
    pad_mask: torch.Tensor        # [N, L] bool, True = real token
    attn_mask: torch.Tensor       # [N, L, L] bool, True = may attend
    role: torch.Tensor            # [N, L] long in {CLS, SENT, WORD, PAD}
    sent_index: torch.Tensor      # [N, L] long
    sent_positions: torch.Tensor  # [N, S] long
    sent_valid: torch.Tensor      # [N, S] bool
    word_start: torch.Tensor      # [N, W] long
    word_end: torch.Tensor        # [N, W] long
    word_valid: torch.Tensor      # [N, W] bool

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]

    def to(self, device) -> "TriBatch":
        moved = {k: v.to(device) for k, v in self.__dict__.items()}
        return TriBatch(**moved)


def build_tri_batch(reports: list[TokenizedReport], cfg: TriBertConfig) -> TriBatch:
    """Assemble padded encoder input from tokenized reports.

    Raises CapExceeded when a report was not pre-truncated to the config
    caps. An empty report list yields an empty zero-length batch.
    """
    seqs = []
    for rep in reports:
        if rep.num_sentences > cfg.max_num_sent:
            raise CapExceeded(
                f"report {rep.id!r}: {rep.num_sentences} sentences > {cfg.max_num_sent}")
        ids = [_CLS_ID]
        types = [0]
        roles = [ROLE_CLS]
        sent_idx = [0]
        sent_pos = []
        word_pos = []
        for si, (ws, we) in enumerate(rep.sentence_spans, start=1):
            sent_pos.append(len(ids))
            ids.append(_sent_token_id(si))
            types.append(si)
            roles.append(ROLE_SENT)
            sent_idx.append(si)
            for w in range(ws, we):
                ts, te = rep.word_spans[w]
                word_pos.append((len(ids), len(ids) + (te - ts)))
                for t in rep.token_ids[ts:te]:
                    ids.append(t)
                    types.append(si)
                    roles.append(ROLE_WORD)
                    sent_idx.append(si)
        if len(ids) > cfg.max_len:
            raise CapExceeded(f"report {rep.id!r}: sequence {len(ids)} > max_len {cfg.max_len}")
        seqs.append((ids, types, roles, sent_idx, sent_pos, word_pos))

    n = len(seqs)
    length = max((len(s[0]) for s in seqs), default=0)
    n_sent = max((len(s[4]) for s in seqs), default=0)
    n_word = max((len(s[5]) for s in seqs), default=0)

    token_ids = torch.full((n, length), _PAD_ID, dtype=torch.long)
    types = torch.zeros((n, length), dtype=torch.long)
    roles = torch.full((n, length), ROLE_PAD, dtype=torch.long)
    sent_index = torch.zeros((n, length), dtype=torch.long)
    pad_mask = torch.zeros((n, length), dtype=torch.bool)
    sent_positions = torch.zeros((n, n_sent), dtype=torch.long)
    sent_valid = torch.zeros((n, n_sent), dtype=torch.bool)
    word_start = torch.zeros((n, n_word), dtype=torch.long)
    word_end = torch.zeros((n, n_word), dtype=torch.long)
    word_valid = torch.zeros((n, n_word), dtype=torch.bool)

    for i, (ids, tys, rls, sidx, spos, wpos) in enumerate(seqs):
        m = len(ids)
        token_ids[i, :m] = torch.tensor(ids, dtype=torch.long)
        types[i, :m] = torch.tensor(tys, dtype=torch.long)
        roles[i, :m] = torch.tensor(rls, dtype=torch.long)
        sent_index[i, :m] = torch.tensor(sidx, dtype=torch.long)
        pad_mask[i, :m] = True
        for j, p in enumerate(spos):
            sent_positions[i, j] = p
            sent_valid[i, j] = True
        for j, (a, b) in enumerate(wpos):
            word_start[i, j] = a
            word_end[i, j] = b
            word_valid[i, j] = True

    batch = TriBatch(
        token_ids=token_ids,
        sentence_type_ids=types,
        position_ids=torch.arange(length).repeat(n, 1),
        pad_mask=pad_mask,
        attn_mask=torch.zeros((n, length, length), dtype=torch.bool),
        role=roles,
        sent_index=sent_index,
        sent_positions=sent_positions,
        sent_valid=sent_valid,
        word_start=word_start,
        word_end=word_end,
        word_valid=word_valid,
    )
    batch.attn_mask = build_tri_mask(batch)
    return batch


def build_tri_mask(batch: TriBatch) -> torch.Tensor:
    """Tri-level attention mask.

    [CLS] and word queries may attend every non-pad position; a [SENT_i]
    query may attend exactly [CLS], itself, and sentence i's word tokens.
    Pad rows and pad columns are all False.
    """
    n, length = batch.pad_mask.shape
    cols_nonpad = batch.pad_mask.unsqueeze(1).expand(n, length, length)
    same_sent = batch.sent_index.unsqueeze(2) == batch.sent_index.unsqueeze(1)
    is_cls_col = torch.zeros(length, dtype=torch.bool)
    if length:
        is_cls_col[0] = True
    sent_allowed = same_sent | is_cls_col.view(1, 1, length)
    q_is_sent = (batch.role == ROLE_SENT).unsqueeze(2)
    mask = torch.where(q_is_sent, sent_allowed & cols_nonpad, cols_nonpad)
    mask = mask & batch.pad_mask.unsqueeze(2)
    return mask


@dataclass
class TextFeatureSet:
    """Report/sentence/word-level readouts of the encoder. Invalid slots are
    zero-filled."""

    f_t_rep: torch.Tensor    # [N, d]
    f_t_sent: torch.Tensor   # [N, S, d]
    sent_valid: torch.Tensor
    f_t_word: torch.Tensor   # [N, W, d]
    word_valid: torch.Tensor
    token_states: torch.Tensor  # [N, L, d]
    attn: torch.Tensor | None = None  # final layer, [N, H, L, L]


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with an explicit attention allow-mask."""

    def __init__(self, dim: int, num_heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)

    def forward(self, x, allowed, return_attn=False):
        h, attn = self.attn(self.norm1(x), allowed, return_attn=return_attn)
        x = x + h
        x = x + self.ff(self.norm2(x))
        return x, attn


class TriBertEncoder(nn.Module):
    """Transformer encoder over tri-level batches.

    Carries its own MLM head; ``encode`` returns the feature set used by the
    alignment and fusion objectives.
    """

    def __init__(self, cfg: TriBertConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.feature_dim)
        # Row 0 serves [CLS]; rows 1..max_num_sent serve the sentence blocks.
        self.sent_type_emb = nn.Embedding(cfg.max_num_sent + 1, cfg.feature_dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.feature_dim)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.feature_dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.mlm_head = nn.Linear(cfg.feature_dim, cfg.vocab_size)

    def input_embeddings(self, batch: TriBatch) -> torch.Tensor:
        if batch.token_ids.numel() and int(batch.token_ids.max()) >= self.cfg.vocab_size:
            raise ShapeMismatch("token id outside configured vocabulary")
        if batch.seq_len > self.cfg.max_len:
            raise ShapeMismatch(f"sequence {batch.seq_len} > max_len {self.cfg.max_len}")
        return (self.token_emb(batch.token_ids)
                + self.sent_type_emb(batch.sentence_type_ids)
                + self.pos_emb(batch.position_ids))

    def encode_from_embeddings(self, emb: torch.Tensor, batch: TriBatch,
                               return_attn: bool = False) -> TextFeatureSet:
        if emb.shape[-1] != self.cfg.feature_dim:
            raise ShapeMismatch(f"embedding dim {emb.shape[-1]} != {self.cfg.feature_dim}")
        x = emb
        attn = None
        for i, block in enumerate(self.blocks):
            want = return_attn and i == len(self.blocks) - 1
            x, a = block(x, batch.attn_mask, return_attn=want)
            if want:
                attn = a
        return extract_text_features(x, batch, attn=attn)

    def encode(self, batch: TriBatch, return_attn: bool = False) -> TextFeatureSet:
        return self.encode_from_embeddings(self.input_embeddings(batch), batch,
                                           return_attn=return_attn)

    forward = encode

    def mlm_logits(self, token_states: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(token_states)


def extract_text_features(states: torch.Tensor, batch: TriBatch,
                          attn: torch.Tensor | None = None) -> TextFeatureSet:
    """Pull report/sentence/word features out of final token states.

    Word features average the states of each word's sub-word span.
    """
    n, length, dim = states.shape
    f_rep = states[:, 0] if length else states.new_zeros((n, dim))

    f_sent = torch.gather(
        states, 1, batch.sent_positions.unsqueeze(-1).expand(-1, -1, dim))
    f_sent = f_sent * batch.sent_valid.unsqueeze(-1)

    pos = torch.arange(length, device=states.device).view(1, 1, length)
    span = (pos >= batch.word_start.unsqueeze(-1)) & (pos < batch.word_end.unsqueeze(-1))
    span = span & batch.word_valid.unsqueeze(-1)
    counts = span.sum(-1, keepdim=True).clamp(min=1)
    f_word = torch.matmul(span.to(states.dtype), states) / counts
    f_word = f_word * batch.word_valid.unsqueeze(-1)

    return TextFeatureSet(
        f_t_rep=f_rep,
        f_t_sent=f_sent,
        sent_valid=batch.sent_valid,
        f_t_word=f_word,
        word_valid=batch.word_valid,
        token_states=states * batch.pad_mask.unsqueeze(-1),
        attn=attn,
    )
