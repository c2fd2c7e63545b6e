"""Synthetic clustered catalog for end-to-end exercises and benchmarks.

Items fall into latent clusters, each owning a set of attributes. An
attribute has one title surface form and several description synonyms, all
globally unique pseudo-words, so the link between a title word and its
description paraphrases is never visible from surface overlap and must be
learned. Every item names a couple of its attributes in the title and
paraphrases a larger sample of them in the description, wrapped in shared
template words that carry no cluster signal.

A slice of each cluster's attributes is drawn from a pool shared across
clusters. Those ambiguous attributes blur the cluster boundaries enough
that rankings stay imperfect and model differences remain measurable.

Ground truth: the positives of a seed item are the other members of its
cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import AnnotationSet, Catalog, CatalogItem

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

# Connective scaffolding shared by all descriptions; carries no cluster signal.
_OPENERS = ("opens with", "leads with", "shows", "pours with")
_CONNECTORS = ("notes of", "a trace of", "layers of", "a core of", "hints of", "touches of")
_CLOSERS = ("on the finish", "through the middle", "into a long close")


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Shape of the generated catalog."""

    num_items: int = 200
    num_clusters: int = 10
    attrs_per_cluster: int = 8
    shared_attrs: int = 2  # attributes per cluster drawn from the shared pool
    shared_pool_size: int = 6
    attrs_per_item: int = 5
    title_attrs: int = 2
    synonyms: int = 3
    seeds_per_cluster: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.num_clusters < 1:
            raise SynthError("need at least one cluster")
        if self.num_items < 2 * self.num_clusters:
            raise SynthError("need at least 2 items per cluster for positives")
        if not 0 <= self.shared_attrs < self.attrs_per_cluster:
            raise SynthError("shared_attrs must leave private attributes")
        if self.shared_attrs > 0 and self.shared_pool_size < self.shared_attrs:
            raise SynthError("shared pool too small")
        if not 1 <= self.title_attrs <= self.attrs_per_item <= self.attrs_per_cluster:
            raise SynthError("need title_attrs <= attrs_per_item <= attrs_per_cluster")
        if self.synonyms < 1:
            raise SynthError("each attribute needs at least one synonym")
        if self.seeds_per_cluster < 1:
            raise SynthError("need at least one seed per cluster")
        min_cluster = self.num_items // self.num_clusters
        if self.seeds_per_cluster > min_cluster:
            raise SynthError("more seeds requested than items in the smallest cluster")


def _word_maker(rng: np.random.Generator):
    used: set[str] = set()

    def fresh_word(syllables: int = 3) -> str:
        while True:
            word = "".join(
                _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
                + _VOWELS[int(rng.integers(len(_VOWELS)))]
                for _ in range(syllables)
            )
            if word not in used:
                used.add(word)
                return word

    return fresh_word


def synth_catalog(cfg: SynthConfig = SynthConfig()) -> tuple[Catalog, AnnotationSet]:
    """Generate the catalog and its same-cluster ground-truth annotations."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    fresh_word = _word_maker(rng)

    def make_attr() -> tuple[str, tuple[str, ...]]:
        title_form = fresh_word()
        return title_form, tuple(fresh_word() for _ in range(cfg.synonyms))

    shared_pool = [make_attr() for _ in range(cfg.shared_pool_size)]
    clusters = []
    for _ in range(cfg.num_clusters):
        private = [make_attr() for _ in range(cfg.attrs_per_cluster - cfg.shared_attrs)]
        if cfg.shared_attrs:
            picks = rng.choice(cfg.shared_pool_size, size=cfg.shared_attrs, replace=False)
            private.extend(shared_pool[int(i)] for i in picks)
        clusters.append(private)

    width = len(str(cfg.num_items - 1))
    items = []
    members: list[list[str]] = [[] for _ in range(cfg.num_clusters)]
    for i in range(cfg.num_items):
        c = i % cfg.num_clusters
        attrs = clusters[c]
        chosen = rng.choice(len(attrs), size=cfg.attrs_per_item, replace=False)
        chosen_attrs = [attrs[int(j)] for j in chosen]
        title = " ".join(a[0] for a in chosen_attrs[: cfg.title_attrs])
        surfaces = [a[1][int(rng.integers(len(a[1])))] for a in chosen_attrs]
        parts = [_OPENERS[int(rng.integers(len(_OPENERS)))]]
        for surf in surfaces:
            parts.append(_CONNECTORS[int(rng.integers(len(_CONNECTORS)))])
            parts.append(surf)
        parts.append(_CLOSERS[int(rng.integers(len(_CLOSERS)))])
        description = " ".join(parts)
        item_id = f"item{i:0{width}d}"
        items.append(CatalogItem(id=item_id, title=title, description=description))
        members[c].append(item_id)

    entries = {}
    for cluster_members in members:
        for seed_id in cluster_members[: cfg.seeds_per_cluster]:
            positives = frozenset(m for m in cluster_members if m != seed_id)
            if positives:
                entries[seed_id] = positives
    return Catalog.from_items(items), AnnotationSet(entries=entries)
