"""Knowledge graph loading, benchmark decoupling and structural statistics.

Entities and relations are stored as string ids with dense integer indices
assigned in first-appearance order. Triples are kept as an ``(m, 3)`` int64
array of ``(head, relation, tail)`` indices.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

# modality id 0 is reserved for "no attribute"
MODALITIES: tuple[str, ...] = ("protein", "molecule", "text")


class GraphFormatError(ValueError):
    """Raised for malformed input files."""


@dataclass(frozen=True)
class AttributeRecord:
    entity: str
    modality: str
    payload: str

    @property
    def modality_id(self) -> int:
        return MODALITIES.index(self.modality) + 1


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triples: np.ndarray
    entity_types: Mapping[str, str] = field(default_factory=dict)
    attributes: Mapping[str, AttributeRecord] = field(default_factory=dict)
    attribute_report: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        triples.setflags(write=False)
        object.__setattr__(self, "triples", triples)
        object.__setattr__(self, "_entity_index", {e: i for i, e in enumerate(self.entities)})
        object.__setattr__(self, "_relation_index", {r: i for i, r in enumerate(self.relations)})

    @property
    def entity_index(self) -> dict[str, int]:
        return self._entity_index

    @property
    def relation_index(self) -> dict[str, int]:
        return self._relation_index

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def modality_of(self, entity: str) -> int:
        rec = self.attributes.get(entity)
        return 0 if rec is None else rec.modality_id

    def type_of(self, entity: str) -> str | None:
        return self.entity_types.get(entity)

    def labeled(self, triples: np.ndarray) -> list[tuple[str, str, str]]:
        return [(self.entities[h], self.relations[r], self.entities[t]) for h, r, t in triples]

    def encode_triples(self, labeled: Iterable[Sequence[str]]) -> np.ndarray:
        """Map string triples onto index triples; unknown ids raise ``KeyError``."""
        rows = [
            (self.entity_index[h], self.relation_index[r], self.entity_index[t])
            for h, r, t in labeled
        ]
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def _read_tsv(path: str | os.PathLike, ncols: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected {ncols} tab-separated columns, got {len(cols)}"
                )
            rows.append(cols)
    return rows


def read_entity_types(path: str | os.PathLike) -> dict[str, str]:
    return {e: t for e, t in _read_tsv(path, 2)}


def build_graph(
    labeled: Iterable[Sequence[str]],
    entity_types: Mapping[str, str] | None = None,
) -> KnowledgeGraph:
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    rows = []
    dupes = 0
    for h, r, t in labeled:
        hi = entities.setdefault(h, len(entities))
        ri = relations.setdefault(r, len(relations))
        ti = entities.setdefault(t, len(entities))
        key = (hi, ri, ti)
        if key in seen:
            dupes += 1
            continue
        seen.add(key)
        rows.append(key)
    if dupes:
        log.info("dropped %d duplicate triples", dupes)
    return KnowledgeGraph(
        entities=tuple(entities),
        relations=tuple(relations),
        triples=np.asarray(rows, dtype=np.int64).reshape(-1, 3),
        entity_types=dict(entity_types or {}),
    )


def ingest_triples(path: str | os.PathLike, types_path: str | os.PathLike | None = None) -> KnowledgeGraph:
    """Load a ``head\\trelation\\ttail`` file, deduplicating repeated lines.

    ``types_path`` optionally points at an ``entity\\ttype`` sidecar file.
    """
    rows = _read_tsv(path, 3)
    if not rows:
        raise GraphFormatError(f"{path}: no triples found")
    types = read_entity_types(types_path) if types_path else None
    kg = build_graph(rows, types)
    log.info(
        "loaded %s: %d entities, %d relations, %d triples",
        path, kg.num_entities, kg.num_relations, len(kg),
    )
    return kg


def attach_attributes(
    kg: KnowledgeGraph,
    path: str | os.PathLike | None = None,
    records: Iterable[Sequence[str]] | None = None,
) -> KnowledgeGraph:
    """Return a copy of ``kg`` with attribute records from an
    ``entity\\tmodality\\tpayload`` file (or an iterable of such rows) attached.

    Records for entities that are not in the graph are skipped and counted in
    ``attribute_report["skipped"]``.
    """
    if records is None:
        if path is None:
            raise ValueError("either path or records is required")
        records = _read_tsv(path, 3)
    attrs = dict(kg.attributes)
    skipped = 0
    for entity, modality, payload in records:
        if modality not in MODALITIES:
            raise GraphFormatError(
                f"unknown modality {modality!r}; registered modalities: {', '.join(MODALITIES)}"
            )
        if not payload.strip():
            raise GraphFormatError(f"empty payload for entity {entity!r}")
        if entity not in kg.entity_index:
            skipped += 1
            continue
        rec = AttributeRecord(entity, modality, payload)
        if entity in attrs and attrs[entity] != rec:
            raise GraphFormatError(f"conflicting attribute records for entity {entity!r}")
        attrs[entity] = rec
    if skipped:
        log.warning("skipped %d attribute records for entities not in the graph", skipped)
    report = {"skipped": skipped, "coverage": _coverage(kg, attrs)}
    return replace(kg, attributes=attrs, attribute_report=report)


def _coverage(kg: KnowledgeGraph, attrs: Mapping[str, AttributeRecord]) -> dict[str, dict[str, int]]:
    cov: dict[str, dict[str, int]] = {}
    for e in kg.entities:
        label = kg.entity_types.get(e, "untyped") if kg.entity_types else "All"
        row = cov.setdefault(label, {"entities": 0, "with_attributes": 0})
        row["entities"] += 1
        row["with_attributes"] += e in attrs
    if kg.entity_types:
        cov["All"] = {
            "entities": kg.num_entities,
            "with_attributes": sum(e in attrs for e in kg.entities),
        }
    return cov


@dataclass(frozen=True)
class BenchmarkPairs:
    pairs: tuple[tuple[str, str, str], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def unordered(self) -> set[frozenset[str]]:
        return {frozenset((a, b)) for a, b, _ in self.pairs}

    def tasks(self) -> list[str]:
        return sorted({t for _, _, t in self.pairs})


def load_benchmarks(*paths: str | os.PathLike) -> BenchmarkPairs:
    """Read and merge ``entity_a\\tentity_b\\ttask`` files."""
    pairs: list[tuple[str, str, str]] = []
    seen = set()
    for p in paths:
        for a, b, task in _read_tsv(p, 3):
            if (a, b, task) not in seen:
                seen.add((a, b, task))
                pairs.append((a, b, task))
    return BenchmarkPairs(tuple(pairs))


@dataclass(frozen=True, eq=False)
class SplitBundle:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    removed: np.ndarray
    dropped_entities: tuple[str, ...] = ()

    def all_known(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def counts(self) -> dict[str, int]:
        return {
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
            "removed": len(self.removed),
        }


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ValueError(f"expected three ratios, got {len(ratios)}")
    if any(not (r > 0) for r in ratios):
        raise ValueError(f"ratios must be positive, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    return tuple(float(r) for r in ratios)  # type: ignore[return-value]


def benchmark_mask(kg: KnowledgeGraph, benchmarks: BenchmarkPairs | None) -> np.ndarray:
    """Boolean mask over ``kg.triples``: True where the endpoints form a benchmark pair."""
    mask = np.zeros(len(kg), dtype=bool)
    if not benchmarks:
        return mask
    idx = kg.entity_index
    pairs = set()
    for a, b, _ in benchmarks.pairs:
        if a in idx and b in idx:
            i, j = idx[a], idx[b]
            pairs.add((min(i, j), max(i, j)))
    if not pairs:
        return mask
    lo = np.minimum(kg.triples[:, 0], kg.triples[:, 2])
    hi = np.maximum(kg.triples[:, 0], kg.triples[:, 2])
    for k, (a, b) in enumerate(zip(lo.tolist(), hi.tolist())):
        mask[k] = (a, b) in pairs
    return mask


def decouple_and_split(
    kg: KnowledgeGraph,
    benchmarks: BenchmarkPairs | None,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitBundle:
    """Remove benchmark-pair triples, split the rest by ratio and repair coverage.

    After the random assignment, every entity that occurs in valid/test but not
    in train gets its lexicographically first valid/test triple moved to train.
    Entities left without any triple are reported in ``dropped_entities``.
    """
    ratios = _check_ratios(ratios)
    mask = benchmark_mask(kg, benchmarks)
    removed = kg.triples[mask]
    kept = kg.triples[~mask]
    if len(kept) == 0:
        raise ValueError("graph is empty after removing benchmark triples")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(kept))
    n_train = int(math.floor(ratios[0] * len(kept)))
    n_valid = int(math.floor(ratios[1] * len(kept)))
    assign = np.empty(len(kept), dtype=np.int8)
    assign[order[:n_train]] = 0
    assign[order[n_train:n_train + n_valid]] = 1
    assign[order[n_train + n_valid:]] = 2

    covered = np.zeros(kg.num_entities, dtype=bool)
    tr = kept[assign == 0]
    covered[tr[:, 0]] = True
    covered[tr[:, 2]] = True

    held = np.flatnonzero(assign != 0)
    # candidate triples per entity, in lexicographic order of their labels
    labels = [
        (kg.entities[h], kg.relations[r], kg.entities[t]) for h, r, t in kept[held]
    ]
    by_label = sorted(range(len(held)), key=labels.__getitem__)
    first_for: dict[int, int] = {}
    for k in by_label:
        h, _, t = kept[held[k]]
        first_for.setdefault(int(h), int(held[k]))
        first_for.setdefault(int(t), int(held[k]))
    uncovered = sorted(
        (e for e in first_for if not covered[e]), key=lambda e: kg.entities[e]
    )
    for e in uncovered:
        if covered[e]:
            continue
        k = first_for[e]
        assign[k] = 0
        h, _, t = kept[k]
        covered[h] = covered[t] = True

    present = np.zeros(kg.num_entities, dtype=bool)
    present[kept[:, 0]] = True
    present[kept[:, 2]] = True
    dropped = tuple(kg.entities[i] for i in np.flatnonzero(~present))

    def pick(a):
        # keep original file order within each split
        return kept[assign == a]

    return SplitBundle(pick(0), pick(1), pick(2), removed, dropped)


def write_split(
    bundle: SplitBundle,
    kg: KnowledgeGraph,
    out_dir: str | os.PathLike,
    seed: int,
    ratios: Sequence[float],
    extra: Mapping[str, object] | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in (
        ("train", bundle.train),
        ("valid", bundle.valid),
        ("test", bundle.test),
        ("removed", bundle.removed),
    ):
        write_triples(out / f"{name}.tsv", kg.labeled(arr))
    manifest = {
        "counts": bundle.counts(),
        "seed": seed,
        "ratios": list(ratios),
        "dropped_entities": list(bundle.dropped_entities),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def write_triples(path: str | os.PathLike, labeled: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerows(labeled)


def read_labeled_triples(path: str | os.PathLike) -> list[tuple[str, str, str]]:
    return [tuple(r) for r in _read_tsv(path, 3)]  # type: ignore[misc]


def load_split(kg: KnowledgeGraph, split_dir: str | os.PathLike) -> SplitBundle:
    d = Path(split_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    parts = {
        name: kg.encode_triples(read_labeled_triples(d / f"{name}.tsv"))
        for name in ("train", "valid", "test", "removed")
    }
    return SplitBundle(
        parts["train"], parts["valid"], parts["test"], parts["removed"],
        tuple(manifest.get("dropped_entities", ())),
    )


def entity_degrees(num_entities: int, triples: np.ndarray) -> np.ndarray:
    """In-degree plus out-degree; a self-loop counts twice."""
    triples = np.asarray(triples).reshape(-1, 3)
    deg = np.bincount(triples[:, 0], minlength=num_entities)
    deg += np.bincount(triples[:, 2], minlength=num_entities)
    return deg


@dataclass(frozen=True)
class DegreeStats:
    count: int
    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float


def _describe(values: np.ndarray) -> DegreeStats:
    v = np.asarray(values, dtype=np.float64)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return DegreeStats(len(v), float(v.mean()), std, *map(float, q))


def degree_table(kg: KnowledgeGraph, triples: np.ndarray | None = None) -> dict[str, DegreeStats]:
    """Degree quantiles per entity type plus an ``"All"`` row.

    Only entities incident to at least one of ``triples`` (default: every
    graph triple) are counted.
    """
    triples = kg.triples if triples is None else triples
    if len(triples) == 0:
        raise ValueError("degree table of an empty graph")
    deg = entity_degrees(kg.num_entities, triples)
    present = deg > 0
    rows: dict[str, DegreeStats] = {}
    if kg.entity_types:
        types = np.array([kg.entity_types.get(e, "") for e in kg.entities], dtype=object)
        for label in sorted({t for t in types[present] if t}):
            sel = present & (types == label)
            rows[label] = _describe(deg[sel])
    rows["All"] = _describe(deg[present])
    return rows
