"""Inference pipeline: embed items, score candidates four ways, rank.

Every item is propagated once through the encoder to precompute its pooled
title and description features (the embedding store). For a seed item s and
candidate m, four scores are available:

* ``cos_d``: cosine of the stored description features of s and m,
* ``cos_t``: cosine of the stored title features,
* ``tdm_sd``: matching score of the mixed pair (candidate title, seed
  description), requiring a fresh forward pass,
* ``tdm_st``: matching score of the mixed pair (seed title, candidate
  description), another fresh pass.

Each score column is z-normalized across the candidate pool, combined with
per-score weights, and candidates are sorted by the total, ties broken by
ascending id. With the two cross weights at zero the forward passes are
skipped entirely; a pass counter makes that observable.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, CatalogItem
from .encoder import ItemEmbedding, Parameters, forward, pool_batch, stack_batch
from .objectives import c_tdm
from .tokenizer import TokenizerError, Vocabulary, encode_pair, tokenize

STORE_MAGIC = b"RCBE"
STORE_VERSION = 1

DEFAULT_LAMBDAS = (1.0, 1.0, 1.0, 1.0)

_STD_EPS = 1e-12


class RankerError(Exception):
    pass


class UnknownSeed(RankerError):
    pass


class EmptyCandidates(RankerError):
    pass


class ZeroVector(RankerError):
    def __init__(self, item_id: str):
        super().__init__(f"zero-norm feature vector for item {item_id!r}")
        self.item_id = item_id


class StoreCorrupt(RankerError):
    pass


class PassCounter:
    """Counts cross-encoder forward passes (one per composed pair)."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


# Default counter used when callers do not supply their own.
CROSS_PASS_COUNTER = PassCounter()


def check_lambdas(lambdas: Sequence[float]) -> tuple[float, float, float, float]:
    values = tuple(float(v) for v in lambdas)
    if len(values) != 4:
        raise ValueError(f"need exactly 4 score weights, got {len(values)}")
    if not all(np.isfinite(values)):
        raise ValueError("score weights must be finite")
    return values


@dataclass(frozen=True)
class EmbeddingStore:
    """Pooled (title, description) features for every embeddable catalog item."""

    ids: tuple[str, ...]
    f_t: np.ndarray  # (N, h) float32
    f_d: np.ndarray
    fingerprint: int  # hash of the producing checkpoint file
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_index", {item_id: i for i, item_id in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def row(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise UnknownSeed(f"item {item_id!r} not in embedding store") from None

    def get(self, item_id: str) -> ItemEmbedding:
        i = self.row(item_id)
        return ItemEmbedding(f_t=self.f_t[i], f_d=self.f_d[i])

    def save(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<I", STORE_VERSION))
            fh.write(struct.pack("<Q", self.fingerprint))
            fh.write(struct.pack("<I", self.f_t.shape[1]))
            fh.write(struct.pack("<I", len(self.skipped)))
            for item_id in self.skipped:
                raw = item_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(struct.pack("<I", len(self.ids)))
            for i, item_id in enumerate(self.ids):
                raw = item_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(np.ascontiguousarray(self.f_t[i], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(self.f_d[i], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        data = Path(path).read_bytes()
        if len(data) < 24 or data[:4] != STORE_MAGIC:
            raise StoreCorrupt(f"{path} is not an embedding store")
        version = struct.unpack_from("<I", data, 4)[0]
        if version != STORE_VERSION:
            raise StoreCorrupt(f"store version {version} unsupported")
        fingerprint = struct.unpack_from("<Q", data, 8)[0]
        hidden = struct.unpack_from("<I", data, 16)[0]
        off = 20

        def read_str(off: int) -> tuple[str, int]:
            if off + 4 > len(data):
                raise StoreCorrupt("truncated store")
            n = struct.unpack_from("<I", data, off)[0]
            off += 4
            if off + n > len(data):
                raise StoreCorrupt("truncated store")
            return data[off:off + n].decode("utf-8"), off + n

        n_skipped = struct.unpack_from("<I", data, off)[0]
        off += 4
        skipped = []
        for _ in range(n_skipped):
            s, off = read_str(off)
            skipped.append(s)
        if off + 4 > len(data):
            raise StoreCorrupt("truncated store")
        count = struct.unpack_from("<I", data, off)[0]
        off += 4
        ids = []
        f_t = np.empty((count, hidden), dtype=np.float32)
        f_d = np.empty((count, hidden), dtype=np.float32)
        vec_bytes = 4 * hidden
        for i in range(count):
            item_id, off = read_str(off)
            ids.append(item_id)
            if off + 2 * vec_bytes > len(data):
                raise StoreCorrupt(f"truncated record for {item_id!r}")
            f_t[i] = np.frombuffer(data[off:off + vec_bytes], dtype="<f4")
            off += vec_bytes
            f_d[i] = np.frombuffer(data[off:off + vec_bytes], dtype="<f4")
            off += vec_bytes
        if off != len(data):
            raise StoreCorrupt("trailing bytes after final record")
        return cls(ids=tuple(ids), f_t=f_t, f_d=f_d,
                   fingerprint=fingerprint, skipped=tuple(skipped))


def _encode_item(item: CatalogItem, vocab: Vocabulary, max_len: int):
    return encode_pair(tokenize(item.title), tokenize(item.description), vocab, max_len)


def embed_catalog(
    params: Parameters,
    catalog: Catalog,
    vocab: Vocabulary,
    batch_size: int = 32,
    fingerprint: int = 0,
) -> EmbeddingStore:
    """Propagate every item through the encoder and pool its features.

    Items that cannot be encoded (e.g. a side with no tokens) are skipped
    with a warning and listed in ``skipped``. Results are independent of the
    batch grouping up to float tolerance.
    """
    seqs = []
    ids = []
    skipped = []
    for item in catalog:
        try:
            seqs.append(_encode_item(item, vocab, params.config.max_len))
            ids.append(item.id)
        except TokenizerError as exc:
            warnings.warn(f"skipping item {item.id!r}: {exc}")
            skipped.append(item.id)
    if not seqs:
        raise RankerError("no catalog item could be encoded")
    h = params.config.hidden
    f_t = np.empty((len(seqs), h), dtype=np.float32)
    f_d = np.empty((len(seqs), h), dtype=np.float32)
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo:lo + batch_size]
        hidden = forward(params, chunk)
        ft, fd = pool_batch(hidden, chunk)
        f_t[lo:lo + len(chunk)] = ft
        f_d[lo:lo + len(chunk)] = fd
    return EmbeddingStore(ids=tuple(ids), f_t=f_t, f_d=f_d,
                          fingerprint=fingerprint, skipped=tuple(skipped))


def _cosine_columns(seed_vec: np.ndarray, mat: np.ndarray,
                    seed_id: str, ids: Sequence[str]) -> np.ndarray:
    seed64 = seed_vec.astype(np.float64)
    mat64 = mat.astype(np.float64)
    seed_norm = np.linalg.norm(seed64)
    if seed_norm < _STD_EPS:
        raise ZeroVector(seed_id)
    norms = np.linalg.norm(mat64, axis=1)
    bad = np.nonzero(norms < _STD_EPS)[0]
    if bad.size:
        raise ZeroVector(ids[int(bad[0])])
    return (mat64 @ seed64) / (norms * seed_norm)


def base_scores(seed: ItemEmbedding, store: EmbeddingStore,
                candidate_ids: Sequence[str], seed_id: str = "<seed>",
                ) -> tuple[np.ndarray, np.ndarray]:
    """Bi-encoder columns: cosine of description and of title features."""
    rows = [store.row(c) for c in candidate_ids]
    cos_d = _cosine_columns(seed.f_d, store.f_d[rows], seed_id, candidate_ids)
    cos_t = _cosine_columns(seed.f_t, store.f_t[rows], seed_id, candidate_ids)
    return cos_d, cos_t


def cross_scores(
    params: Parameters,
    seed: CatalogItem,
    candidates: Sequence[CatalogItem],
    vocab: Vocabulary,
    batch_size: int = 32,
    counter: PassCounter | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-encoder columns from mixed pairs; two forward passes per candidate.

    ``tdm_sd`` scores (candidate title, seed description); ``tdm_st`` scores
    (seed title, candidate description). Both lie in [0, 1].
    """
    if counter is None:
        counter = CROSS_PASS_COUNTER
    max_len = params.config.max_len
    seed_title = tokenize(seed.title)
    seed_desc = tokenize(seed.description)
    seqs = []
    for cand in candidates:
        cand_title = tokenize(cand.title)
        cand_desc = tokenize(cand.description)
        seqs.append(encode_pair(cand_title, seed_desc, vocab, max_len))  # tdm_sd
        seqs.append(encode_pair(seed_title, cand_desc, vocab, max_len))  # tdm_st
    scores = np.empty(len(seqs), dtype=np.float64)
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo:lo + batch_size]
        hidden = forward(params, chunk)
        counter.add(len(chunk))
        f_t, f_d = pool_batch(hidden, chunk)
        scores[lo:lo + len(chunk)] = c_tdm(f_t, f_d, params)
    return scores[0::2].copy(), scores[1::2].copy()


def znormalize(column: Sequence[float] | np.ndarray) -> np.ndarray:
    """Standardize to zero mean and unit variance with the population std.

    Degenerate columns (single element, or std below 1e-12) map to zeros,
    leaving the ordering to the other score columns or the tie-break.
    """
    x = np.asarray(column, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty column")
    if x.size == 1:
        return np.zeros_like(x)
    std = float(x.std())  # population std
    if std < _STD_EPS:
        return np.zeros_like(x)
    return (x - x.mean()) / std


@dataclass(frozen=True)
class ScoreTable:
    """Raw score columns for one seed over an ordered candidate pool.

    The two cross columns are ``None`` when the cross passes were skipped.
    """

    seed_id: str
    candidate_ids: tuple[str, ...]
    cos_d: np.ndarray
    cos_t: np.ndarray
    tdm_sd: np.ndarray | None
    tdm_st: np.ndarray | None


@dataclass(frozen=True)
class RankedEntry:
    id: str
    total: float
    cos_d: float
    cos_t: float
    tdm_sd: float | None
    tdm_st: float | None


@dataclass(frozen=True)
class RankedList:
    """Candidates for one seed, best first; ties broken by ascending id."""

    seed_id: str
    entries: tuple[RankedEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    def position(self, item_id: str) -> int:
        """1-based rank of the given candidate."""
        for i, e in enumerate(self.entries):
            if e.id == item_id:
                return i + 1
        raise KeyError(f"{item_id!r} not among ranked candidates of {self.seed_id!r}")


def score_table(
    params: Parameters,
    catalog: Catalog,
    store: EmbeddingStore,
    vocab: Vocabulary,
    seed_id: str,
    candidate_ids: Sequence[str] | None = None,
    need_cross: bool = True,
    batch_size: int = 32,
    counter: PassCounter | None = None,
) -> ScoreTable:
    """Compute raw score columns for one seed; cross columns only on demand."""
    if seed_id not in catalog:
        raise UnknownSeed(f"seed {seed_id!r} not in catalog")
    if candidate_ids is None:
        candidate_ids = [i for i in store.ids if i != seed_id]
    else:
        candidate_ids = [i for i in candidate_ids if i != seed_id]
    if not candidate_ids:
        raise EmptyCandidates(f"no candidates for seed {seed_id!r}")
    cos_d, cos_t = base_scores(store.get(seed_id), store, candidate_ids, seed_id)
    tdm_sd = tdm_st = None
    if need_cross:
        seed_item = catalog.get(seed_id)
        cand_items = [catalog.get(c) for c in candidate_ids]
        tdm_sd, tdm_st = cross_scores(params, seed_item, cand_items, vocab,
                                      batch_size=batch_size, counter=counter)
    return ScoreTable(seed_id=seed_id, candidate_ids=tuple(candidate_ids),
                      cos_d=cos_d, cos_t=cos_t, tdm_sd=tdm_sd, tdm_st=tdm_st)


def rank_from_table(table: ScoreTable, lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> RankedList:
    """Normalize each column, combine with the weights, sort descending."""
    l1, l2, l3, l4 = check_lambdas(lambdas)
    need_cross = l3 != 0.0 or l4 != 0.0
    if need_cross and (table.tdm_sd is None or table.tdm_st is None):
        raise RankerError("cross weights are nonzero but the table has no cross columns")
    total = l1 * znormalize(table.cos_d) + l2 * znormalize(table.cos_t)
    if need_cross:
        total = total + l3 * znormalize(table.tdm_sd) + l4 * znormalize(table.tdm_st)
    order = sorted(range(len(table.candidate_ids)),
                   key=lambda i: (-total[i], table.candidate_ids[i]))
    entries = []
    for i in order:
        entries.append(RankedEntry(
            id=table.candidate_ids[i],
            total=float(total[i]),
            cos_d=float(table.cos_d[i]),
            cos_t=float(table.cos_t[i]),
            tdm_sd=float(table.tdm_sd[i]) if table.tdm_sd is not None else None,
            tdm_st=float(table.tdm_st[i]) if table.tdm_st is not None else None,
        ))
    return RankedList(seed_id=table.seed_id, entries=tuple(entries))


def rank(
    seed_id: str,
    catalog: Catalog,
    store: EmbeddingStore,
    params: Parameters,
    vocab: Vocabulary,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    skip_cross: bool = False,
    candidate_ids: Sequence[str] | None = None,
    batch_size: int = 32,
    counter: PassCounter | None = None,
) -> RankedList:
    """Rank all candidates for a seed by the weighted sum of normalized scores.

    When both cross weights are zero, or ``skip_cross`` is set, no cross
    forward pass runs and ranking falls back to the precomputed features
    alone (the bi-encoder baseline).
    """
    l1, l2, l3, l4 = check_lambdas(lambdas)
    need_cross = not skip_cross and (l3 != 0.0 or l4 != 0.0)
    if skip_cross and (l3 != 0.0 or l4 != 0.0):
        lambdas = (l1, l2, 0.0, 0.0)
    table = score_table(params, catalog, store, vocab, seed_id,
                        candidate_ids=candidate_ids, need_cross=need_cross,
                        batch_size=batch_size, counter=counter)
    return rank_from_table(table, lambdas)


def save_recommendations(rankings: Iterable[RankedList], path: str | Path,
                         top: int | None = None) -> None:
    """Write one JSON line per seed: {seed_id, ranked: [...]}, best first."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for ranking in rankings:
            entries = ranking.entries if top is None else ranking.entries[:top]
            fh.write(json.dumps({
                "seed_id": ranking.seed_id,
                "ranked": [
                    {"id": e.id, "total": e.total, "cos_d": e.cos_d, "cos_t": e.cos_t,
                     "tdm_sd": e.tdm_sd, "tdm_st": e.tdm_st}
                    for e in entries
                ],
            }) + "\n")
