"""Rank-based link prediction evaluation.

Ranks use the realistic convention ``1 + #greater + #ties / 2`` rounded half
up, where ties exclude the true entity itself. In filtered mode, candidates
that complete another known triple are removed before ranking.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import scoring
from .graph import entity_degrees
from .model import ModelState

HEAD, TAIL = 0, 1
SIDES = {"head": HEAD, "tail": TAIL}


class FilterIndex:
    """Known true heads for ``(r, t)`` and tails for ``(h, r)``."""

    def __init__(self, triples: Iterable[Sequence[int]] = ()):
        self.tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.heads: dict[tuple[int, int], set[int]] = defaultdict(set)
        if not isinstance(triples, np.ndarray):
            triples = list(triples)
        for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
            self.tails[(h, r)].add(t)
            self.heads[(r, t)].add(h)

    def known(self, triple: Sequence[int], side: int) -> set[int]:
        h, r, t = (int(x) for x in triple)
        if side == TAIL:
            return self.tails.get((h, r), set())
        return self.heads.get((r, t), set())


def realistic_rank(scores: np.ndarray, true_idx: int, exclude: Iterable[int] = ()) -> int:
    """Rank of ``scores[true_idx]`` among candidates not in ``exclude``."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    ex = [i for i in exclude if i != true_idx]
    if ex:
        keep[ex] = False
    keep[true_idx] = False
    target = scores[true_idx]
    others = scores[keep]
    greater = int(np.sum(others > target))
    ties = int(np.sum(others == target))
    return 1 + greater + (ties + 1) // 2


def _as_index_triple(model: ModelState, triple) -> tuple[int, int, int]:
    h, r, t = triple
    if isinstance(h, str):
        return model.entity_index[h], model.relation_index[r], model.entity_index[t]
    return int(h), int(r), int(t)


def candidate_scores(model: ModelState, triples: np.ndarray, side: int,
                     entity_emb: np.ndarray | None = None) -> np.ndarray:
    """Scores ``(len(triples), |V|)`` replacing the head or tail by every entity."""
    E = model.embed_all() if entity_emb is None else entity_emb
    R = model.relation_matrix()
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    kind = model.spec.scorer
    if side == TAIL:
        return scoring.score_packed(kind, E[triples[:, 0]][:, None], R[triples[:, 1]][:, None], E[None])
    return scoring.score_packed(kind, E[None], R[triples[:, 1]][:, None], E[triples[:, 2]][:, None])


def rank_triple(model: ModelState, triple, side: str | int = "tail",
                filter: FilterIndex | Iterable[Sequence[int]] | None = None) -> int:
    """Rank of the true entity at ``side`` among all model entities."""
    side = SIDES.get(side, side) if isinstance(side, str) else side
    triple = _as_index_triple(model, triple)
    scores = candidate_scores(model, np.array([triple]), side)[0]
    true_idx = triple[2] if side == TAIL else triple[0]
    exclude: Iterable[int] = ()
    if filter is not None:
        if not isinstance(filter, FilterIndex):
            filter = FilterIndex(filter)
        exclude = filter.known(triple, side)
    return realistic_rank(scores, true_idx, exclude)


def rank_all(model: ModelState, triples, filter: FilterIndex | None = None,
             chunk: int | None = None) -> np.ndarray:
    """Ranks ``(m, 2)``: column 0 head prediction, column 1 tail prediction."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    E = model.embed_all()
    n_ent = len(model.entities)
    if chunk is None:
        chunk = max(1, 2_000_000 // max(1, n_ent * E.shape[1]))
    ranks = np.empty((len(triples), 2), dtype=np.int64)
    for start in range(0, len(triples), chunk):
        part = triples[start:start + chunk]
        for side in (HEAD, TAIL):
            S = candidate_scores(model, part, side, E)
            true = part[:, 2] if side == TAIL else part[:, 0]
            target = S[np.arange(len(part)), true]
            keep = np.ones_like(S, dtype=bool)
            if filter is not None:
                for i, tr in enumerate(part):
                    known = filter.known(tr, side)
                    if known:
                        keep[i, list(known)] = False
            keep[np.arange(len(part)), true] = False
            greater = np.sum((S > target[:, None]) & keep, axis=1)
            ties = np.sum((S == target[:, None]) & keep, axis=1)
            ranks[start:start + len(part), side] = 1 + greater + (ties + 1) // 2
    return ranks


def mrr(ranks) -> float:
    r = np.asarray(ranks, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("mrr of an empty rank list")
    # correctly rounded sum, independent of summation order
    return math.fsum((1.0 / r).tolist()) / r.size


def hits_at_k(ranks, k: float) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = np.asarray(ranks, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("hits@k of an empty rank list")
    return float(np.mean(r <= k))


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    count: int
    mode: str
    per_relation: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks, mode: str, ks=(1, 3, 10)) -> "MetricsReport":
        return cls(mrr(ranks), {k: hits_at_k(ranks, k) for k in ks}, int(np.size(ranks)), mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hits"] = {f"hits@{k}": v for k, v in self.hits.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(model: ModelState, triples, filter=None, ks=(1, 3, 10)) -> MetricsReport:
    """MRR and hits@k over head and tail prediction of ``triples``.

    ``filter`` is a ``FilterIndex`` or an iterable of known triples; ``None``
    gives raw ranks.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise ValueError("no triples to evaluate")
    if filter is not None and not isinstance(filter, FilterIndex):
        filter = FilterIndex(filter)
    ranks = rank_all(model, triples, filter)
    report = MetricsReport.from_ranks(ranks, "filtered" if filter is not None else "raw", ks)
    for r in np.unique(triples[:, 1]):
        sel = triples[:, 1] == r
        sub = MetricsReport.from_ranks(ranks[sel], report.mode, ks)
        report.per_relation[model.relations[r]] = {
            "mrr": sub.mrr, "count": sub.count, **{f"hits@{k}": v for k, v in sub.hits.items()}
        }
    return report


@dataclass(frozen=True)
class DegreeDelta:
    group: str  # "target": predicting target-type entities, "other": the rest
    degree: int  # log2 bucket lower bound; 0 for entities absent from training
    delta_mrr: float
    count: int


def degree_bucket(degree: int) -> int:
    return 0 if degree <= 0 else 1 << int(math.floor(math.log2(degree)))


def degree_stratified_delta(model_a: ModelState, model_b: ModelState, triples,
                            target_type: str, entity_types, train_triples,
                            filter=None) -> list[DegreeDelta]:
    """Per predicted-entity degree bucket, ``MRR(model_a) - MRR(model_b)``.

    Only triples with at least one ``target_type`` endpoint are used. A
    (triple, side) pair lands in group ``"target"`` when the predicted entity
    has ``target_type``, otherwise in ``"other"`` (the given entity has it).
    Degrees are counted on ``train_triples``.
    """
    if tuple(model_a.entities) != tuple(model_b.entities):
        raise ValueError("models must share the entity vocabulary")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    is_target = np.array([entity_types.get(e) == target_type for e in model_a.entities])
    touch = is_target[triples[:, 0]] | is_target[triples[:, 2]]
    if not touch.any():
        raise ValueError(f"no triples touch entity type {target_type!r}")
    triples = triples[touch]
    if filter is not None and not isinstance(filter, FilterIndex):
        filter = FilterIndex(filter)
    ra = rank_all(model_a, triples, filter)
    rb = rank_all(model_b, triples, filter)
    deg = entity_degrees(len(model_a.entities), train_triples)
    acc: dict[tuple[str, int], list] = defaultdict(lambda: [0.0, 0.0, 0])
    for side in (HEAD, TAIL):
        pred = triples[:, 0] if side == HEAD else triples[:, 2]
        for i, e in enumerate(pred):
            group = "target" if is_target[e] else "other"
            cell = acc[(group, degree_bucket(int(deg[e])))]
            cell[0] += 1.0 / ra[i, side]
            cell[1] += 1.0 / rb[i, side]
            cell[2] += 1
    return [
        DegreeDelta(g, d, float((a - b) / n), n)
        for (g, d), (a, b, n) in sorted(acc.items())
    ]


def write_degree_tsv(rows: Sequence[DegreeDelta], path, group: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["degree", "delta_mrr", "count"])
        for row in rows:
            if row.group == group:
                w.writerow([row.degree, repr(float(row.delta_mrr)), row.count])


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: float
    p: float


def welch_test(rr_a, rr_b) -> TTestResult:
    """Welch's unequal-variance t-test, two-sided."""
    a = np.asarray(rr_a, dtype=np.float64)
    b = np.asarray(rr_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("welch_test needs at least two samples per group")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        dof = float(len(a) + len(b) - 2)
        if diff == 0:
            return TTestResult(0.0, dof, 1.0)
        return TTestResult(math.copysign(math.inf, diff), dof, 0.0)
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = 2.0 * stats.t.sf(abs(t), dof)
    return TTestResult(float(t), float(dof), float(min(1.0, p)))


def paired_t_test(rr_a, rr_b) -> TTestResult:
    """Paired t-test on triple-aligned samples, the other reading of the comparison."""
    d = np.asarray(rr_a, dtype=np.float64) - np.asarray(rr_b, dtype=np.float64)
    if len(d) < 2:
        raise ValueError("paired_t_test needs at least two pairs")
    dof = float(len(d) - 1)
    sd = d.std(ddof=1)
    if sd == 0:
        if d.mean() == 0:
            return TTestResult(0.0, dof, 1.0)
        return TTestResult(math.copysign(math.inf, d.mean()), dof, 0.0)
    t = d.mean() / (sd / math.sqrt(len(d)))
    return TTestResult(float(t), dof, float(2.0 * stats.t.sf(abs(t), dof)))
