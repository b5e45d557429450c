"""Corpus ingestion, vocab, and the two masking channels.

Tokens and positions are corrupted by separate streams so that turning
position masking on or off can never change which tokens were masked.
Branch semantics:

  tokens    mask 0.80 / keep 0.10 / random 0.10 (random = non-special id)
  positions mask 0.90 / keep 0.05 / random 0.05 (mask = the reserved row,
            random = an index drawn from the example's non-pad span)

Both splits are configuration, not constants; only the defaults differ.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .seeds import derive_seed

__all__ = [
    "AssemblyError",
    "BRANCH_KEEP",
    "BRANCH_MASK",
    "BRANCH_RANDOM",
    "DataError",
    "Example",
    "MaskSplit",
    "MaskedBatch",
    "MaskingConfig",
    "PAD_ID",
    "RESERVED_TOKENS",
    "SlotAlignment",
    "Vocab",
    "apply_position_mask",
    "apply_token_mask",
    "assemble_batch",
    "build_vocab",
    "make_examples",
    "select_mask_slots",
]

RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
SPECIAL_IDS = frozenset(range(5))

BRANCH_MASK, BRANCH_KEEP, BRANCH_RANDOM = 0, 1, 2


class DataError(ValueError):
    """Bad corpus, vocab, or example input."""


class AssemblyError(ValueError):
    """A batch invariant failed; the message names the example."""


class Vocab:
    """Frequency-ranked token list with the five reserved ids in front."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:5]) != RESERVED_TOKENS:
            raise DataError(f"vocab must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        """Lowercased whitespace tokens; unknowns map to [UNK]."""
        return [self.index.get(tok, UNK_ID) for tok in text.lower().split()]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


def write_vocab_file(vocab: Vocab, path) -> None:
    """One token per line; the id is the line number."""
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def read_vocab_file(path) -> Vocab:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(tokens)


def build_vocab(lines, max_size: int) -> Vocab:
    """Rank corpus tokens by frequency (ties broken lexicographically)."""
    if max_size <= len(RESERVED_TOKENS):
        raise DataError(f"max_size {max_size} leaves no room beyond reserved tokens")
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.lower().split())
    if not counts:
        raise DataError("empty corpus: no tokens to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED_TOKENS)]]
    return Vocab(list(RESERVED_TOKENS) + keep)


@dataclass
class Example:
    """[CLS] body [SEP], padded to a fixed length."""

    ids: np.ndarray  # int64 [S]
    valid_len: int  # CLS + body + SEP

    @property
    def seq_len(self) -> int:
        return int(self.ids.shape[0])

    @property
    def body_slots(self) -> np.ndarray:
        """Positions holding body tokens (everything between CLS and SEP)."""
        return np.arange(1, self.valid_len - 1, dtype=np.int64)


def make_examples(token_ids, seq_len: int) -> list[Example]:
    """Greedily pack a token stream into fixed-length examples.

    Each example takes the next seq_len - 2 tokens; a final fragment
    shorter than that still becomes an example (padded), so no token is
    dropped except when the stream is empty.
    """
    if seq_len < 3:
        raise DataError(f"seq_len {seq_len} leaves no room for a body")
    ids = np.asarray(token_ids, dtype=np.int64)
    body_cap = seq_len - 2
    examples = []
    for start in range(0, len(ids), body_cap):
        body = ids[start : start + body_cap]
        if body.size == 0:
            break
        row = np.full(seq_len, PAD_ID, dtype=np.int64)
        row[0] = CLS_ID
        row[1 : 1 + body.size] = body
        row[1 + body.size] = SEP_ID
        examples.append(Example(ids=row, valid_len=int(body.size) + 2))
    return examples


@dataclass
class MaskSplit:
    """Branch fractions for one masking channel; must sum to 1."""

    mask: float
    keep: float
    random: float

    def __post_init__(self):
        total = self.mask + self.keep + self.random
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise DataError(f"mask split sums to {total}, not 1")
        if min(self.mask, self.keep, self.random) < 0:
            raise DataError("mask split has a negative branch")

    def draw(self, rng: np.random.Generator) -> int:
        u = rng.random()
        if u < self.mask:
            return BRANCH_MASK
        if u < self.mask + self.keep:
            return BRANCH_KEEP
        return BRANCH_RANDOM

    def to_dict(self) -> dict:
        return asdict(self)


class SlotAlignment:
    """Whether position slots are drawn independently of token slots."""

    INDEPENDENT = "independent"
    SAME_SLOTS = "same-slots"
    ALL = (INDEPENDENT, SAME_SLOTS)


@dataclass
class MaskingConfig:
    token_mask_pct: float = 0.15
    position_mask_pct: float = 0.10
    token_split: MaskSplit = field(default_factory=lambda: MaskSplit(0.80, 0.10, 0.10))
    position_split: MaskSplit = field(default_factory=lambda: MaskSplit(0.90, 0.05, 0.05))
    alignment: str = SlotAlignment.INDEPENDENT

    def __post_init__(self):
        for name in ("token_mask_pct", "position_mask_pct"):
            pct = getattr(self, name)
            if not 0.0 <= pct <= 1.0:
                raise DataError(f"{name}={pct} outside [0, 1]")
        if self.alignment not in SlotAlignment.ALL:
            raise DataError(f"unknown alignment {self.alignment!r}")

    def to_dict(self) -> dict:
        return {
            "token_mask_pct": self.token_mask_pct,
            "position_mask_pct": self.position_mask_pct,
            "token_split": self.token_split.to_dict(),
            "position_split": self.position_split.to_dict(),
            "alignment": self.alignment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskingConfig":
        d = dict(d)
        if "token_split" in d:
            d["token_split"] = MaskSplit(**d["token_split"])
        if "position_split" in d:
            d["position_split"] = MaskSplit(**d["position_split"])
        return cls(**d)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_mask_slots(example: Example, pct: float, rng: np.random.Generator) -> np.ndarray:
    """Choose round(pct * body_len) distinct body slots, ascending.

    Never selects CLS/SEP/pad slots; selects at least one slot whenever
    pct > 0 and the body is non-empty.
    """
    body = example.body_slots
    if pct == 0.0 or body.size == 0:
        return np.empty(0, dtype=np.int64)
    count = _round_half_up(pct * body.size)
    count = max(1, min(count, body.size))
    chosen = rng.choice(body, size=count, replace=False)
    return np.sort(chosen.astype(np.int64))


def apply_token_mask(
    example: Example,
    slots: np.ndarray,
    split: MaskSplit,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt token ids at the given slots.

    Returns (new_ids, labels, branches): labels hold the original id at
    every slot regardless of branch; the random branch draws a uniform
    non-special id.
    """
    ids = example.ids.copy()
    labels = example.ids[slots].copy()
    branches = np.empty(len(slots), dtype=np.int64)
    for j, slot in enumerate(slots):
        branch = split.draw(rng)
        branches[j] = branch
        if branch == BRANCH_MASK:
            ids[slot] = MASK_ID
        elif branch == BRANCH_RANDOM:
            ids[slot] = int(rng.integers(len(SPECIAL_IDS), vocab_size))
    return ids, labels, branches


def apply_position_mask(
    example: Example,
    slots: np.ndarray,
    split: MaskSplit,
    rng: np.random.Generator,
    mask_position_id: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt position ids at the given slots.

    Position ids start as the identity 0..S-1. The mask branch writes the
    reserved row id; the random branch draws a uniform index over the
    example's non-pad span [0, valid_len). Labels hold the true index.
    """
    position_ids = np.arange(example.seq_len, dtype=np.int64)
    labels = slots.astype(np.int64).copy()
    branches = np.empty(len(slots), dtype=np.int64)
    for j, slot in enumerate(slots):
        branch = split.draw(rng)
        branches[j] = branch
        if branch == BRANCH_MASK:
            position_ids[slot] = mask_position_id
        elif branch == BRANCH_RANDOM:
            position_ids[slot] = int(rng.integers(0, example.valid_len))
    return position_ids, labels, branches


@dataclass
class MaskedBatch:
    """Model-ready arrays; slots are (batch_row, seq_index) pairs."""

    input_ids: np.ndarray  # int64 [B, S]
    position_ids: np.ndarray  # int64 [B, S]
    token_mask_slots: np.ndarray  # int64 [M, 2]
    token_labels: np.ndarray  # int64 [M]
    position_mask_slots: np.ndarray  # int64 [Mp, 2]
    position_labels: np.ndarray  # int64 [Mp]
    seed: int

    @property
    def batch_size(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.input_ids.shape[1])


def assemble_batch(
    examples: list[Example],
    config: MaskingConfig,
    seed: int,
    vocab_size: int,
    mask_position_id: int,
) -> MaskedBatch:
    """Mask a list of same-length examples into one batch.

    The seed fans out into a token stream and a position stream (one
    each per example), so identical seeds reproduce the batch bitwise
    and the two channels never read each other's draws.
    """
    if not examples:
        raise AssemblyError("assemble_batch: empty example list")
    seq_len = examples[0].seq_len
    input_rows, position_rows = [], []
    tok_slots, tok_labels = [], []
    pos_slots, pos_labels = [], []
    for row, ex in enumerate(examples):
        if ex.seq_len != seq_len:
            raise AssemblyError(
                f"example {row}: seq_len {ex.seq_len} != batch seq_len {seq_len}"
            )
        if ex.valid_len < 2 or ex.valid_len > seq_len:
            raise AssemblyError(f"example {row}: valid_len {ex.valid_len} out of range")
        if ex.ids[0] != CLS_ID or ex.ids[ex.valid_len - 1] != SEP_ID:
            raise AssemblyError(f"example {row}: missing CLS/SEP frame")
        if (ex.ids[ex.valid_len :] != PAD_ID).any():
            raise AssemblyError(f"example {row}: non-pad token after SEP")

        tok_rng = np.random.default_rng(derive_seed(seed, "token-mask", row))
        pos_rng = np.random.default_rng(derive_seed(seed, "position-mask", row))

        t_slots = select_mask_slots(ex, config.token_mask_pct, tok_rng)
        ids, t_labels, _ = apply_token_mask(ex, t_slots, config.token_split, tok_rng, vocab_size)

        if config.alignment == SlotAlignment.SAME_SLOTS:
            p_slots = t_slots if config.position_mask_pct > 0 else np.empty(0, np.int64)
        else:
            p_slots = select_mask_slots(ex, config.position_mask_pct, pos_rng)
        position_ids, p_labels, _ = apply_position_mask(
            ex, p_slots, config.position_split, pos_rng, mask_position_id
        )

        for s in t_slots:
            if ex.ids[s] in SPECIAL_IDS and ex.ids[s] != UNK_ID:
                raise AssemblyError(f"example {row}: token slot {s} targets a special token")

        input_rows.append(ids)
        position_rows.append(position_ids)
        tok_slots.extend((row, int(s)) for s in t_slots)
        tok_labels.extend(int(v) for v in t_labels)
        pos_slots.extend((row, int(s)) for s in p_slots)
        pos_labels.extend(int(v) for v in p_labels)

    return MaskedBatch(
        input_ids=np.stack(input_rows),
        position_ids=np.stack(position_rows),
        token_mask_slots=np.asarray(tok_slots, dtype=np.int64).reshape(-1, 2),
        token_labels=np.asarray(tok_labels, dtype=np.int64),
        position_mask_slots=np.asarray(pos_slots, dtype=np.int64).reshape(-1, 2),
        position_labels=np.asarray(pos_labels, dtype=np.int64),
        seed=seed,
    )
