"""Small synthetic multimodal knowledge graphs with a planted pattern.

Entities sit on a ring of size ``N``. Relation ``shift_k`` links ``x`` to
``x + k mod N`` for each offset, so with offsets ``(1, 2, 3)`` the third
relation is the composition of the first two. A fraction of the entities
carry attributes split evenly over the protein, molecule and text
modalities; the rest are embedded by lookup rows.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import KnowledgeGraph, attach_attributes, build_graph, write_triples

AMINO = "ACDEFGHIKLMNPQRSTVWY"
SMILES = "CNOSPFcno()=#123"
WORDS = (
    "chronic acute inherited rare disorder syndrome infection inflammatory "
    "metabolic neural cardiac renal hepatic pulmonary skin bone immune "
    "deficiency progressive onset juvenile adult severe mild lesion tumor"
).split()

TYPE_OF_MODALITY = {"protein": "protein", "molecule": "drug", "text": "disease"}


def _entity_name(i: int, width: int) -> str:
    return f"e{i:0{width}d}"


def ring_triples(num_entities: int, offsets=(1, 2, 3)) -> list[tuple[str, str, str]]:
    width = len(str(num_entities - 1))
    return [
        (_entity_name(x, width), f"shift_{k}", _entity_name((x + k) % num_entities, width))
        for k in offsets
        for x in range(num_entities)
    ]


def make_synthetic_kg(num_entities: int = 50, coverage: float = 0.6, seed: int = 0,
                      offsets=(1, 2, 3)) -> KnowledgeGraph:
    rng = np.random.default_rng(seed)
    labeled = ring_triples(num_entities, offsets)
    width = len(str(num_entities - 1))
    names = [_entity_name(i, width) for i in range(num_entities)]
    order = rng.permutation(num_entities)
    n_attr = int(round(coverage * num_entities))
    modalities = ("protein", "molecule", "text")
    types, records = {}, []
    for j, idx in enumerate(order):
        name = names[idx]
        if j >= n_attr:
            types[name] = "pathway"
            continue
        mod = modalities[j % 3]
        types[name] = TYPE_OF_MODALITY[mod]
        records.append((name, mod, _payload(mod, rng, name)))
    kg = build_graph(labeled, types)
    return attach_attributes(kg, records=records)


def _payload(modality: str, rng: np.random.Generator, name: str) -> str:
    if modality == "protein":
        return "".join(rng.choice(list(AMINO), size=rng.integers(4, 9)))
    if modality == "molecule":
        return "".join(rng.choice(list(SMILES), size=rng.integers(4, 9)))
    words = list(rng.choice(WORDS, size=rng.integers(3, 7)))
    # one entity-specific word keeps descriptions distinguishable
    return " ".join(words + [f"term{name}"])


def write_synthetic(out_dir, num_entities: int = 50, coverage: float = 0.6, seed: int = 0,
                    num_benchmark_pairs: int = 5) -> Path:
    """Write ``triples.tsv``, ``types.tsv``, ``attributes.tsv`` and ``benchmarks.tsv``.

    Benchmark pairs link drugs to proteins; some of them coincide with graph
    triples so that decoupling has something to remove.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kg = make_synthetic_kg(num_entities, coverage, seed)
    write_triples(out / "triples.tsv", kg.labeled(kg.triples))
    write_triples(out / "types.tsv", [(e, kg.entity_types[e]) for e in kg.entities])  # type: ignore[list-item]
    write_triples(out / "attributes.tsv",
                  [(r.entity, r.modality, r.payload) for r in kg.attributes.values()])
    rng = np.random.default_rng(seed + 1)
    drugs = [e for e in kg.entities if kg.entity_types[e] == "drug"]
    prots = [e for e in kg.entities if kg.entity_types[e] == "protein"]
    pairs = set()
    while len(pairs) < min(num_benchmark_pairs, len(drugs) * len(prots)):
        pairs.add((drugs[rng.integers(len(drugs))], prots[rng.integers(len(prots))]))
    write_triples(out / "benchmarks.tsv", [(a, b, "DPI") for a, b in sorted(pairs)])
    return out
