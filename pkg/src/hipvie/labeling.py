"""Semantic encoder over multimodal token sequences with MLM, reading-order and tag heads."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import CATEGORIES, Box, Vocab, Word, box_union, spatial_order
from .chargrid import _encoder

log = logging.getLogger(__name__)

IGNORE = -100
N_BUCKETS = 1001


@dataclass
class SemConfig:
    layers: int = 6
    heads: int = 4
    hidden: int = 256
    mlp: int = 1024
    max_len: int = 1024
    visual_channels: int = 256
    ror_channels: int = 64
    mlm_ratio: float = 0.15
    position_jitter: float = 1.5  # px std of char-box noise in training sequences
    mlm_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    categories: tuple[str, ...] = CATEGORIES


@dataclass
class TokenSequence:
    token_ids: torch.Tensor  # (T,)
    word_index: torch.Tensor  # (T,) index into the input word list
    line_index: torch.Tensor  # (T,) line rank in reading order
    positions: torch.Tensor  # (T, 4) quantized x0, y0, x1, y1 in [0, 1000]
    visual: torch.Tensor  # (N, C) one row per input word
    word_order: list[int] = field(default_factory=list)
    first_token: dict[int, int] = field(default_factory=dict)  # word -> token position
    line_boxes: list[Box] = field(default_factory=list)  # by line rank
    line_first_token: list[int] = field(default_factory=list)
    mode: str = "train"

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


@dataclass
class MLMBatch:
    input_ids: torch.Tensor
    labels: torch.Tensor
    selection: list[int]


def quantize_box(b: Sequence[float], width: float, height: float) -> list[int]:
    """Pixel box -> integer buckets 0..1000 per coordinate."""
    def q(v, n):
        return int(min(max(round(1000.0 * v / n), 0), 1000))
    return [q(b[0], width), q(b[1], height), q(b[2], width), q(b[3], height)]


def build_sequence(words: Sequence[Word], visual: torch.Tensor, width: int, height: int,
                   mode: str = "train", vocab: Vocab | None = None, jitter: float = 0.0,
                   rng: np.random.Generator | None = None) -> TokenSequence:
    """Character tokens of all words in reading order, one position box per character.

    ``mode`` records whether texts are ground truth ("train") or spotted ("infer").
    ``jitter`` > 0 adds Gaussian pixel noise to each char box before quantisation, so
    the position buckets seen in training cover the small box errors of spotted words.
    """
    if jitter > 0 and rng is None:
        raise ValueError("jitter needs an rng")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if visual.shape[0] != len(words):
        raise ValueError(f"{visual.shape[0]} visual rows for {len(words)} words")
    vocab = vocab or Vocab()
    order = spatial_order([w.box for w in words]) if words else []
    line_members: dict[int, list[int]] = {}
    for i, w in enumerate(words):
        line_members.setdefault(w.line_id, []).append(i)
    line_ids = sorted(line_members)
    line_boxes_raw = [box_union([words[i].box for i in line_members[l]]) for l in line_ids]
    line_rank_order = spatial_order(line_boxes_raw) if line_ids else []
    rank_of = {line_ids[k]: r for r, k in enumerate(line_rank_order)}
    tokens, widx, lidx, pos = [], [], [], []
    first_token = {}
    for wi in order:
        w = words[wi]
        first_token[wi] = len(tokens)
        for c in w.chars:
            tokens.append(vocab.encode_char(c.char))
            widx.append(wi)
            lidx.append(rank_of[w.line_id])
            box = c.box if jitter <= 0 else np.asarray(c.box) + rng.normal(0.0, jitter, 4)
            pos.append(quantize_box(box, width, height))
    n_lines = len(line_ids)
    line_first = [-1] * n_lines
    for t, r in enumerate(lidx):
        if line_first[r] < 0:
            line_first[r] = t
    return TokenSequence(
        token_ids=torch.tensor(tokens, dtype=torch.long),
        word_index=torch.tensor(widx, dtype=torch.long),
        line_index=torch.tensor(lidx, dtype=torch.long),
        positions=torch.tensor(pos, dtype=torch.long).reshape(-1, 4),
        visual=visual,
        word_order=list(order),
        first_token=first_token,
        line_boxes=[line_boxes_raw[k] for k in line_rank_order],
        line_first_token=line_first,
        mode=mode,
    )


class SemanticEncoder(nn.Module):
    """Token + visual + 2-D position embeddings into a plain transformer encoder."""

    def __init__(self, cfg: SemConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.tok = nn.Embedding(vocab_size, d)
        self.pos = nn.ModuleList(nn.Embedding(N_BUCKETS, d) for _ in range(4))
        self.visual = nn.Linear(cfg.visual_channels, d) if cfg.visual_channels != d else nn.Identity()
        self.norm = nn.LayerNorm(d)
        self.encoder = _encoder(cfg.layers, d, cfg.heads, cfg.mlp)

    def embed(self, seq: TokenSequence, input_ids: torch.Tensor | None = None) -> torch.Tensor:
        ids = seq.token_ids if input_ids is None else input_ids
        x = self.tok(ids) + self.visual(seq.visual)[seq.word_index]
        for k, table in enumerate(self.pos):
            x = x + table(seq.positions[:, k])
        return self.norm(x)

    def forward(self, seqs: Sequence[TokenSequence], input_ids: Sequence[torch.Tensor | None] | None = None):
        """Encode a batch; returns one (T_i, hidden) tensor per sequence."""
        if input_ids is None:
            input_ids = [None] * len(seqs)
        lengths = [len(s) for s in seqs]
        for n in lengths:
            if n > self.cfg.max_len:
                raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        T = max(lengths, default=0)
        if T == 0:
            return [self.tok.weight.new_zeros((0, self.cfg.hidden)) for _ in seqs]
        emb = [self.embed(s, ids) for s, ids in zip(seqs, input_ids)]
        x = torch.stack([F.pad(e, (0, 0, 0, T - e.shape[0])) for e in emb])
        pad = torch.tensor([[t >= n for t in range(T)] for n in lengths])
        out = self.encoder(x, src_key_padding_mask=pad if any(n < T for n in lengths) else None)
        return [out[b, :n] for b, n in enumerate(lengths)]


def semantic_encode(encoder: SemanticEncoder, seq: TokenSequence, input_ids=None) -> torch.Tensor:
    if len(seq) < 1:
        raise ValueError("empty sequence")
    return encoder([seq], [input_ids])[0]


# -- MLM ------------------------------------------------------------------------

def mlm_corrupt(seq: TokenSequence, selection: Sequence[int], rng: np.random.Generator,
                split: tuple[float, float, float] = (0.8, 0.1, 0.1), vocab: Vocab | None = None) -> MLMBatch:
    """Corrupt every token of the selected words: [MASK] / random token / unchanged."""
    vocab = vocab or Vocab()
    p_mask, p_rand, _ = split
    ids = seq.token_ids.clone()
    labels = torch.full_like(ids, IGNORE)
    chosen = set(int(w) for w in selection)
    for t in range(len(seq)):
        if int(seq.word_index[t]) not in chosen:
            continue
        labels[t] = ids[t]
        u = rng.random()
        if u < p_mask:
            ids[t] = vocab.mask_id
        elif u < p_mask + p_rand:
            ids[t] = int(rng.integers(vocab.n_special, len(vocab)))
    return MLMBatch(ids, labels, sorted(chosen))


def loss_mlm(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if not bool((labels != IGNORE).any()):
        return logits.new_zeros(())
    return F.cross_entropy(logits, labels, ignore_index=IGNORE)


# -- reading order ------------------------------------------------------------------

class PairHead(nn.Module):
    """Project line features to ``channels``; score each ordered pair from rep_i - rep_j."""

    def __init__(self, hidden: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(hidden, channels)
        self.pair = nn.Sequential(nn.Linear(channels, channels), nn.ReLU(), nn.Linear(channels, 1))

    def forward(self, reps: torch.Tensor) -> torch.Tensor:
        r = self.proj(reps)
        return self.pair(r[:, None, :] - r[None, :, :])[..., 0]


def ror_forward(head: PairHead, features: torch.Tensor, seq: TokenSequence) -> torch.Tensor:
    """N_lines x N_lines successor logits from each line's first token feature."""
    return head(features[seq.line_first_token])


def ror_targets(line_boxes: Sequence[Box]) -> np.ndarray:
    """Binary successor matrix: 1 at (line k, line k+1) in reading order."""
    n = len(line_boxes)
    t = np.zeros((n, n), dtype=np.float64)
    order = spatial_order(line_boxes) if n else []
    for a, b in zip(order, order[1:]):
        t[a, b] = 1.0
    return t


def loss_ror(logits: torch.Tensor, targets) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.new_zeros(())
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(targets, dtype=logits.dtype))


# -- entity tags ----------------------------------------------------------------------

def entity_representations(features: torch.Tensor, seq: TokenSequence, entities: Sequence[Sequence[int]]):
    """Mean of member words' first-token features; returns (reps, kept entity indices)."""
    reps, kept = [], []
    for k, members in enumerate(entities):
        toks = [seq.first_token[w] for w in members if w in seq.first_token]
        if not toks:
            log.warning("entity %d has no words in the sequence; skipped", k)
            continue
        reps.append(features[toks].mean(0))
        kept.append(k)
    if not reps:
        return features.new_zeros((0, features.shape[-1])), kept
    return torch.stack(reps), kept


def tag_entities(head: nn.Linear, features: torch.Tensor, seq: TokenSequence, entities):
    reps, kept = entity_representations(features, seq, entities)
    return head(reps), kept


def loss_tag(logits: torch.Tensor, targets) -> torch.Tensor:
    if logits.shape[0] == 0:
        return logits.new_zeros(())
    return F.cross_entropy(logits, torch.as_tensor(targets, dtype=torch.long))
