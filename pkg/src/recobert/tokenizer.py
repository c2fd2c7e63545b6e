"""Corpus-derived vocabulary and model input construction.

Tokenization is a deterministic whitespace + punctuation split over
NFKC-normalized, lowercased text. Encoded sequences follow the layout
``[CLS] title [SEP] description [PAD...]`` with explicit spans so pooling
and masking never touch special tokens.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hashing import fnv1a64

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)

VOCAB_HEADER = "#recobert-vocab v1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class TokenizerError(Exception):
    pass


class EmptyVocabulary(TokenizerError):
    pass


class EmptySide(TokenizerError):
    def __init__(self, side: str):
        super().__init__(f"{side} tokenizes to zero tokens")
        self.side = side


def tokenize(text: str) -> list[str]:
    """Split text into lowercase word and punctuation tokens.

    NFKC-normalizes first, so width/compatibility variants collapse; runs of
    whitespace never produce tokens. Empty input yields an empty list.
    """
    normalized = unicodedata.normalize("NFKC", text).lower()
    return _TOKEN_RE.findall(normalized)


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id mapping with fixed special ids 0..4 (PAD, UNK, CLS, SEP, MASK)."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def num_content_tokens(self) -> int:
        return len(self.id_to_token) - NUM_SPECIALS

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def to_text(self) -> str:
        lines = [VOCAB_HEADER]
        lines.extend(self.id_to_token[NUM_SPECIALS:])
        return "\n".join(lines) + "\n"

    def file_hash(self) -> int:
        """64-bit FNV-1a over the serialized vocabulary file bytes."""
        return fnv1a64(self.to_text().encode("utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @staticmethod
    def from_tokens(tokens: Sequence[str]) -> "Vocabulary":
        id_to_token = SPECIAL_TOKENS + tuple(tokens)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise TokenizerError("vocabulary contains duplicate tokens")
        return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token)

    @staticmethod
    def load(path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise TokenizerError(f"not a vocabulary file (missing {VOCAB_HEADER!r} header)")
        return Vocabulary.from_tokens([line for line in lines[1:] if line])


def build_vocab(corpus: Iterable[str], min_freq: int = 1, max_size: int = 50000) -> Vocabulary:
    """Build a vocabulary from raw text strings.

    Keeps tokens with frequency >= min_freq, ranked by (frequency desc, token
    asc), capped so the total size including the 5 specials is max_size.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    kept = [(tok, n) for tok, n in counts.items() if n >= min_freq]
    if not kept:
        raise EmptyVocabulary(f"no token reaches min_freq={min_freq}")
    kept.sort(key=lambda pair: (-pair[1], pair[0]))
    capacity = max(0, max_size - NUM_SPECIALS)
    if capacity == 0:
        raise EmptyVocabulary(f"max_size={max_size} leaves no room beyond specials")
    return Vocabulary.from_tokens([tok for tok, _ in kept[:capacity]])


@dataclass(frozen=True)
class InputSequence:
    """Encoded [CLS] title [SEP] description [PAD...] sequence of fixed length.

    ``title_span`` and ``desc_span`` are [start, end) ranges over title and
    description token positions only; CLS, SEP, and PAD are excluded.
    Segment 1 marks the description side, 0 everything else.
    """

    ids: tuple[int, ...]
    segments: tuple[int, ...]
    title_span: tuple[int, int]
    desc_span: tuple[int, int]
    pad_len: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def content_positions(self) -> tuple[int, ...]:
        t0, t1 = self.title_span
        d0, d1 = self.desc_span
        return tuple(range(t0, t1)) + tuple(range(d0, d1))


@dataclass(frozen=True)
class MaskedSequence:
    """An input sequence with token masking applied.

    ``targets`` records (position, original id) pairs for every position the
    masking pass selected, all of them inside the title or description span.
    """

    base: InputSequence
    targets: tuple[tuple[int, int], ...]


def encode_pair(
    title_tokens: Sequence[str],
    desc_tokens: Sequence[str],
    vocab: Vocabulary,
    max_len: int,
    title_cap: int = 32,
) -> InputSequence:
    """Encode a title/description token pair into a fixed-length sequence.

    The title is truncated to ``title_cap`` tokens (and never past
    ``max_len - 3``, so at least one description token always fits); the
    description is truncated to whatever remains. Out-of-vocabulary tokens
    map to UNK.
    """
    if max_len < 4:
        raise ValueError("max_len must be >= 4 (CLS + title + SEP + description)")
    if not title_tokens:
        raise EmptySide("title")
    if not desc_tokens:
        raise EmptySide("description")
    title = list(title_tokens)[: min(title_cap, max_len - 3)]
    desc = list(desc_tokens)[: max_len - len(title) - 2]

    ids = [CLS] + vocab.encode(title) + [SEP] + vocab.encode(desc)
    t0, t1 = 1, 1 + len(title)
    d0, d1 = t1 + 1, t1 + 1 + len(desc)
    pad_len = max_len - len(ids)
    ids.extend([PAD] * pad_len)
    segments = [0] * d0 + [1] * len(desc) + [0] * pad_len
    return InputSequence(
        ids=tuple(ids),
        segments=tuple(segments),
        title_span=(t0, t1),
        desc_span=(d0, d1),
        pad_len=pad_len,
    )


def apply_masking(
    seq: InputSequence,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
) -> MaskedSequence:
    """Mask title/description positions for the reconstruction objective.

    Each content position is selected independently with probability ``rate``;
    if the rate is positive but nothing got selected, one position is forced so
    every sample carries at least one target. A selected position becomes the
    MASK token with probability ``mask_prob``, a uniform random non-special
    token with probability ``random_prob``, and stays unchanged otherwise.
    CLS, SEP, and PAD positions are never touched.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if mask_prob + random_prob > 1.0 + 1e-12:
        raise ValueError("mask_prob + random_prob must be <= 1")
    positions = seq.content_positions
    if rate == 0.0 or not positions:
        return MaskedSequence(base=seq, targets=())

    selected = np.asarray(rng.random(len(positions)) < rate)
    if not selected.any():
        selected[rng.integers(0, len(positions))] = True

    ids = list(seq.ids)
    targets: list[tuple[int, int]] = []
    for pos, hit in zip(positions, selected):
        if not hit:
            continue
        original = ids[pos]
        targets.append((pos, original))
        u = rng.random()
        if u < mask_prob:
            ids[pos] = MASK
        elif u < mask_prob + random_prob:
            if len(vocab) > NUM_SPECIALS:
                ids[pos] = int(rng.integers(NUM_SPECIALS, len(vocab)))
    return MaskedSequence(base=replace(seq, ids=tuple(ids)), targets=tuple(targets))
