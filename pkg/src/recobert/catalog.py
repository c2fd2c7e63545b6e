"""Textual catalogs: loading, validation, wine-CSV import, and train/val splits.

A catalog is an ordered set of items, each carrying an id plus a
title-description text pair. All text is NFKC-normalized and stripped at
load time so downstream tokenization is stable.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CatalogError(Exception):
    """Base class for catalog loading/validation failures."""


class MissingField(CatalogError):
    def __init__(self, record_no: int, name: str):
        super().__init__(f"record {record_no}: missing field {name!r}")
        self.record_no = record_no
        self.name = name


class DuplicateId(CatalogError):
    def __init__(self, item_id: str):
        super().__init__(f"duplicate item id {item_id!r}")
        self.item_id = item_id


class EmptyText(CatalogError):
    def __init__(self, item_id: str, name: str):
        super().__init__(f"item {item_id!r}: empty {name}")
        self.item_id = item_id
        self.name = name


class MissingColumn(CatalogError):
    def __init__(self, name: str):
        super().__init__(f"CSV is missing required column {name!r}")
        self.name = name


class UnknownId(CatalogError):
    def __init__(self, item_id: str, record_no: int):
        super().__init__(f"record {record_no}: id {item_id!r} not in catalog")
        self.item_id = item_id
        self.record_no = record_no


class DegenerateSplit(CatalogError):
    pass


def _clean(text: str) -> str:
    return unicodedata.normalize("NFKC", text).strip()


@dataclass(frozen=True)
class CatalogItem:
    """One catalog entry: a unique id with a title sentence and a description paragraph."""

    id: str
    title: str
    description: str


@dataclass(frozen=True)
class Catalog:
    """Immutable ordered collection of items with an id index."""

    items: tuple[CatalogItem, ...]
    index: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def from_items(items: Sequence[CatalogItem]) -> "Catalog":
        index: dict[str, int] = {}
        for pos, item in enumerate(items):
            if item.id in index:
                raise DuplicateId(item.id)
            index[item.id] = pos
        return Catalog(items=tuple(items), index=index)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[CatalogItem]:
        return iter(self.items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.index

    def get(self, item_id: str) -> CatalogItem:
        return self.items[self.index[item_id]]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(item.id for item in self.items)


@dataclass(frozen=True)
class AnnotationSet:
    """Expert ground truth: each seed id maps to a nonempty set of similar item ids."""

    entries: dict[str, frozenset[str]]
    dropped_self_refs: int = 0

    @property
    def num_pairs(self) -> int:
        return sum(len(p) for p in self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)


def _make_item(record_no: int, item_id: str, title: str, description: str) -> CatalogItem:
    item_id = _clean(item_id)
    title = _clean(title)
    description = _clean(description)
    if not item_id:
        raise EmptyText(f"<record {record_no}>", "id")
    if not title:
        raise EmptyText(item_id, "title")
    if not description:
        raise EmptyText(item_id, "description")
    return CatalogItem(id=item_id, title=title, description=description)


def load_catalog(path: str | Path, format: str = "jsonl") -> Catalog:
    """Load and validate a catalog file.

    JSONL files carry one ``{"id", "title", "description"}`` object per line;
    CSV files need a header row with those three columns. Whitespace is
    trimmed, text is NFKC-normalized, and duplicate ids abort the load.
    """
    path = Path(path)
    if format == "jsonl":
        records = _iter_jsonl_records(path)
    elif format == "csv":
        records = _iter_csv_records(path)
    else:
        raise ValueError(f"unknown catalog format {format!r}")

    items: list[CatalogItem] = []
    seen: set[str] = set()
    for record_no, record in records:
        for name in ("id", "title", "description"):
            if name not in record or record[name] is None:
                raise MissingField(record_no, name)
        item = _make_item(record_no, str(record["id"]), str(record["title"]), str(record["description"]))
        if item.id in seen:
            raise DuplicateId(item.id)
        seen.add(item.id)
        items.append(item)
    return Catalog.from_items(items)


def _iter_jsonl_records(path: Path):
    with path.open("r", encoding="utf-8") as fh:
        for record_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"record {record_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CatalogError(f"record {record_no}: expected a JSON object")
            yield record_no, record


def _iter_csv_records(path: Path):
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for record_no, row in enumerate(reader, start=1):
            yield record_no, row


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    """Write a catalog as canonical JSONL (keys exactly id, title, description)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in catalog:
            fh.write(json.dumps(
                {"id": item.id, "title": item.title, "description": item.description},
                ensure_ascii=False, sort_keys=False))
            fh.write("\n")


_YEAR_RE = re.compile(r"\b(1[89]\d{2}|20\d{2})\b")

#: Default column mapping for the public wine-review CSV schema. The vintage
#: year is not its own column there; it is embedded in the source title.
WINE_COLUMNS: dict[str, str | None] = {
    "winery": "winery",
    "year": None,
    "name": "designation",
    "variety": "variety",
    "description": "description",
    "id": None,
    "source_title": "title",
}


@dataclass(frozen=True)
class WineImportStats:
    total_rows: int
    imported: int
    dropped_empty_description: int
    unreadable_rows: int


def import_wine_csv(
    path: str | Path,
    columns: Mapping[str, str | None] | None = None,
) -> tuple[Catalog, WineImportStats]:
    """Import a wine-review CSV into a catalog.

    Titles are composed from the winery, year, wine name, and grape variety
    columns, joined with single spaces and skipping empty components. When no
    year column exists, a four-digit year is extracted from the source title
    column. Rows with an empty description are dropped (counted in the stats),
    as are rows that cannot be read. Item ids come from the id column when one
    is mapped, otherwise from the CSV row index.
    """
    cols = dict(WINE_COLUMNS)
    if columns:
        cols.update(columns)

    path = Path(path)
    items: list[CatalogItem] = []
    seen: set[str] = set()
    total = dropped = unreadable = 0
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if cols["description"] not in header:
            raise MissingColumn(str(cols["description"]))
        if cols["winery"] not in header:
            raise MissingColumn(str(cols["winery"]))
        for row_no, row in enumerate(reader):
            total += 1
            try:
                description = _clean(row.get(cols["description"]) or "")
                if not description:
                    dropped += 1
                    continue
                winery = _clean(row.get(cols["winery"]) or "")
                name = _clean(_col(row, cols["name"]))
                variety = _clean(_col(row, cols["variety"]))
                year = _clean(_col(row, cols["year"]))
                if not year:
                    match = _YEAR_RE.search(_col(row, cols["source_title"]))
                    year = match.group(1) if match else ""
                title = " ".join(part for part in (winery, year, name, variety) if part)
                if not title:
                    dropped += 1
                    continue
                item_id = _clean(_col(row, cols["id"])) or str(row_no)
                if item_id in seen:
                    raise DuplicateId(item_id)
                seen.add(item_id)
                items.append(CatalogItem(id=item_id, title=title, description=description))
            except DuplicateId:
                raise
            except Exception:
                unreadable += 1
                logger.warning("skipping unreadable CSV row %d", row_no)
    stats = WineImportStats(
        total_rows=total,
        imported=len(items),
        dropped_empty_description=dropped,
        unreadable_rows=unreadable,
    )
    if dropped or unreadable:
        logger.info(
            "wine import: %d rows, %d imported, %d dropped (empty description), %d unreadable",
            total, len(items), dropped, unreadable)
    return Catalog.from_items(items), stats


def _col(row: Mapping[str, str | None], name: str | None) -> str:
    if name is None:
        return ""
    return row.get(name) or ""


def load_annotations(path: str | Path, catalog: Catalog) -> AnnotationSet:
    """Load a JSONL annotation set ({seed_id, positive_ids}) against a catalog.

    Every id must resolve in the catalog. Self-references are dropped with a
    warning; seeds whose positive set becomes empty are dropped as well.
    Repeated seed records merge their positive sets.
    """
    entries: dict[str, set[str]] = {}
    dropped_self = 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for record_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            for name in ("seed_id", "positive_ids"):
                if name not in record:
                    raise MissingField(record_no, name)
            seed_id = _clean(str(record["seed_id"]))
            if seed_id not in catalog:
                raise UnknownId(seed_id, record_no)
            positives: set[str] = set()
            for raw in record["positive_ids"]:
                positive_id = _clean(str(raw))
                if positive_id not in catalog:
                    raise UnknownId(positive_id, record_no)
                if positive_id == seed_id:
                    dropped_self += 1
                    logger.warning("record %d: dropping self-reference %r", record_no, seed_id)
                    continue
                positives.add(positive_id)
            if not positives:
                logger.warning("record %d: seed %r has no usable positives, skipping", record_no, seed_id)
                continue
            entries.setdefault(seed_id, set()).update(positives)
    return AnnotationSet(
        entries={seed: frozenset(p) for seed, p in entries.items()},
        dropped_self_refs=dropped_self,
    )


def save_annotations(annotations: AnnotationSet, path: str | Path) -> None:
    """Write an annotation set as JSONL with sorted, reproducible ordering."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for seed_id in sorted(annotations.entries):
            record = {"seed_id": seed_id, "positive_ids": sorted(annotations.entries[seed_id])}
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")


def split_train_val(catalog: Catalog, val_fraction: float, seed: int) -> tuple[Catalog, Catalog]:
    """Deterministically partition a catalog into train and validation catalogs.

    The validation side receives ``ceil(val_fraction * len(catalog))`` items
    chosen by a seeded shuffle; both sides preserve the original item order.
    Raises DegenerateSplit when either side would be empty.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    c = len(catalog)
    if c < 2:
        raise DegenerateSplit("catalog needs at least 2 items to split")
    n_val = math.ceil(val_fraction * c)
    if n_val < 1 or n_val >= c:
        raise DegenerateSplit(f"split of {c} items with fraction {val_fraction} leaves one side empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(c)
    val_positions = set(int(i) for i in order[:n_val])
    train_items = [item for pos, item in enumerate(catalog.items) if pos not in val_positions]
    val_items = [item for pos, item in enumerate(catalog.items) if pos in val_positions]
    return Catalog.from_items(train_items), Catalog.from_items(val_items)
