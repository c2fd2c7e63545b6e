"""Ranking-quality metrics computed per (seed, positive) pair and averaged.

For every annotated seed the candidate pool is ranked once; each annotated
positive then contributes one sample keyed by its 1-based rank:

* hit ratio at k: 1 if the rank is within the top k,
* reciprocal rank: 1/rank,
* percentile rank: (N - rank)/(N - 1), oriented so 1.0 means the positive
  always sits at the top. The raw rank/N form would make small values good;
  the flipped orientation matches how such tables are usually read, with
  the best method showing the largest percentage.

``evaluate`` builds the rankings for a weight configuration and emits a
report; ``evaluate_grid`` scores many weight configurations while computing
the expensive raw score columns only once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .catalog import AnnotationSet, Catalog
from .encoder import Parameters
from .ranker import (
    DEFAULT_LAMBDAS,
    EmbeddingStore,
    PassCounter,
    RankedList,
    ScoreTable,
    check_lambdas,
    embed_catalog,
    rank_from_table,
    score_table,
)
from .tokenizer import Vocabulary

# Weight grid for the ablation study: all scores, bi-encoder only,
# cross only, then each single score removed.
ABLATION_GRID: dict[str, tuple[float, float, float, float]] = {
    "full": (1.0, 1.0, 1.0, 1.0),
    "l3,l4=0": (1.0, 1.0, 0.0, 0.0),
    "l1,l2=0": (0.0, 0.0, 1.0, 1.0),
    "l1=0": (0.0, 1.0, 1.0, 1.0),
    "l2=0": (1.0, 0.0, 1.0, 1.0),
    "l3=0": (1.0, 1.0, 0.0, 1.0),
    "l4=0": (1.0, 1.0, 1.0, 0.0),
}


class MetricsError(Exception):
    pass


class MissingRanking(MetricsError):
    def __init__(self, seed_id: str):
        super().__init__(f"no ranking available for annotated seed {seed_id!r}")
        self.seed_id = seed_id


def _pair_ranks(rankings: Mapping[str, RankedList],
                annotations: AnnotationSet) -> list[tuple[int, int]]:
    """(rank, pool_size) for every (seed, positive) pair, seeds in sorted order."""
    out = []
    for seed_id in sorted(annotations.entries):
        ranking = rankings.get(seed_id)
        if ranking is None:
            raise MissingRanking(seed_id)
        positions = {e.id: i + 1 for i, e in enumerate(ranking.entries)}
        n = len(ranking.entries)
        for positive in sorted(annotations.entries[seed_id]):
            try:
                r = positions[positive]
            except KeyError:
                raise MetricsError(
                    f"positive {positive!r} missing from the ranking of {seed_id!r}") from None
            out.append((r, n))
    if not out:
        raise MetricsError("annotation set yields no (seed, positive) pairs")
    return out


def hit_ratio_at_k(rankings: Mapping[str, RankedList], annotations: AnnotationSet, k: int) -> float:
    """Fraction of (seed, positive) pairs whose positive ranks in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs = _pair_ranks(rankings, annotations)
    return sum(1 for r, _ in pairs if r <= k) / len(pairs)


def mean_reciprocal_rank(rankings: Mapping[str, RankedList], annotations: AnnotationSet) -> float:
    """Mean of 1/rank over all (seed, positive) pairs."""
    pairs = _pair_ranks(rankings, annotations)
    return sum(1.0 / r for r, _ in pairs) / len(pairs)


def mean_percentile_rank(rankings: Mapping[str, RankedList], annotations: AnnotationSet) -> float:
    """Mean of (N - rank)/(N - 1); 1.0 is best, 0.0 worst."""
    pairs = _pair_ranks(rankings, annotations)
    for _, n in pairs:
        if n < 2:
            raise MetricsError("percentile rank needs a pool of at least 2 candidates")
    return sum((n - r) / (n - 1) for r, n in pairs) / len(pairs)


@dataclass(frozen=True)
class EvalReport:
    """All metrics for one weight configuration over one annotation set."""

    mode: str  # "full" or "subset"
    lambdas: tuple[float, float, float, float]
    ks: tuple[int, ...]
    mpr: float
    mrr: float
    hr: dict[int, float]
    counts: dict[str, int]  # seeds, pairs, pool_size
    checkpoint_fingerprint: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "lambdas": list(self.lambdas),
            "ks": list(self.ks),
            "metrics": {
                "mpr": self.mpr,
                "mrr": self.mrr,
                "hr": {str(k): v for k, v in self.hr.items()},
            },
            "counts": dict(self.counts),
            "checkpoint_fingerprint": f"{self.checkpoint_fingerprint:016x}",
        }


def metrics_from_rankings(
    rankings: Mapping[str, RankedList],
    annotations: AnnotationSet,
    ks: Sequence[int],
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    mode: str = "full",
    checkpoint_fingerprint: int = 0,
) -> EvalReport:
    """Assemble a report from already-built rankings."""
    pairs = _pair_ranks(rankings, annotations)
    pool = pairs[0][1]
    return EvalReport(
        mode=mode,
        lambdas=check_lambdas(lambdas),
        ks=tuple(int(k) for k in ks),
        mpr=mean_percentile_rank(rankings, annotations),
        mrr=mean_reciprocal_rank(rankings, annotations),
        hr={int(k): hit_ratio_at_k(rankings, annotations, int(k)) for k in ks},
        counts={"seeds": len(annotations.entries), "pairs": len(pairs), "pool_size": pool},
        checkpoint_fingerprint=checkpoint_fingerprint,
    )


def _candidate_pool(annotations: AnnotationSet, mode: str) -> list[str] | None:
    if mode == "full":
        return None  # every stored item
    if mode == "subset":
        members = set(annotations.entries)
        for positives in annotations.entries.values():
            members.update(positives)
        return sorted(members)
    raise ValueError(f"mode must be 'full' or 'subset', got {mode!r}")


def build_score_tables(
    params: Parameters,
    catalog: Catalog,
    annotations: AnnotationSet,
    vocab: Vocabulary,
    store: EmbeddingStore,
    mode: str = "full",
    need_cross: bool = True,
    batch_size: int = 32,
    counter: PassCounter | None = None,
) -> dict[str, ScoreTable]:
    """One raw score table per annotated seed, under the given pool mode."""
    pool = _candidate_pool(annotations, mode)
    tables = {}
    for seed_id in sorted(annotations.entries):
        tables[seed_id] = score_table(
            params, catalog, store, vocab, seed_id, candidate_ids=pool,
            need_cross=need_cross, batch_size=batch_size, counter=counter)
    return tables


def evaluate(
    params: Parameters,
    catalog: Catalog,
    annotations: AnnotationSet,
    vocab: Vocabulary,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    ks: Sequence[int] = (1, 5, 10),
    mode: str = "full",
    store: EmbeddingStore | None = None,
    batch_size: int = 32,
    counter: PassCounter | None = None,
    checkpoint_fingerprint: int = 0,
) -> EvalReport:
    """Rank every annotated seed under one weight configuration and report.

    ``full`` mode ranks each seed against all other embeddable items;
    ``subset`` mode restricts the pool to items appearing in the annotation
    set (all seeds and all positives).
    """
    lambdas = check_lambdas(lambdas)
    if store is None:
        store = embed_catalog(params, catalog, vocab, batch_size=batch_size,
                              fingerprint=checkpoint_fingerprint)
    need_cross = lambdas[2] != 0.0 or lambdas[3] != 0.0
    tables = build_score_tables(params, catalog, annotations, vocab, store,
                                mode=mode, need_cross=need_cross,
                                batch_size=batch_size, counter=counter)
    rankings = {s: rank_from_table(t, lambdas) for s, t in tables.items()}
    return metrics_from_rankings(rankings, annotations, ks, lambdas, mode,
                                 checkpoint_fingerprint)


def evaluate_grid(
    params: Parameters,
    catalog: Catalog,
    annotations: AnnotationSet,
    vocab: Vocabulary,
    grid: Mapping[str, Sequence[float]] = ABLATION_GRID,
    ks: Sequence[int] = (1, 5, 10),
    mode: str = "full",
    store: EmbeddingStore | None = None,
    batch_size: int = 32,
    counter: PassCounter | None = None,
    checkpoint_fingerprint: int = 0,
) -> dict[str, EvalReport]:
    """Evaluate many weight configurations over shared raw score tables."""
    configs = {name: check_lambdas(lam) for name, lam in grid.items()}
    if store is None:
        store = embed_catalog(params, catalog, vocab, batch_size=batch_size,
                              fingerprint=checkpoint_fingerprint)
    need_cross = any(l3 != 0.0 or l4 != 0.0 for _, _, l3, l4 in configs.values())
    tables = build_score_tables(params, catalog, annotations, vocab, store,
                                mode=mode, need_cross=need_cross,
                                batch_size=batch_size, counter=counter)
    reports = {}
    for name, lam in configs.items():
        rankings = {s: rank_from_table(t, lam) for s, t in tables.items()}
        reports[name] = metrics_from_rankings(rankings, annotations, ks, lam, mode,
                                              checkpoint_fingerprint)
    return reports


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def save_grid_report(reports: Mapping[str, EvalReport], path: str | Path) -> None:
    first = next(iter(reports.values()))
    combined = {
        "mode": first.mode,
        "ks": list(first.ks),
        "checkpoint_fingerprint": f"{first.checkpoint_fingerprint:016x}",
        "rows": {name: r.to_dict() for name, r in reports.items()},
    }
    Path(path).write_text(json.dumps(combined, indent=2) + "\n", encoding="utf-8")


def render_table(reports: Mapping[str, EvalReport]) -> str:
    """Aligned text table: one row per configuration, metrics as percentages.

    Columns run MPR, MRR, then HR@k with k descending.
    """
    first = next(iter(reports.values()))
    ks = sorted(first.ks, reverse=True)
    headers = ["config", "MPR", "MRR"] + [f"HR@{k}" for k in ks]
    rows = []
    for name, r in reports.items():
        rows.append([name, f"{100.0 * r.mpr:.1f}%", f"{100.0 * r.mrr:.1f}%"]
                    + [f"{100.0 * r.hr[k]:.1f}%" for k in ks])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
