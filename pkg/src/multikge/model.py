"""Model state: lookup tables, attribute encoders and the entity dispatch."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch

from . import scoring
from .encoders import (
    DEFAULT_ENCODER,
    ENCODER_KINDS,
    MAX_TEXT_LEN,
    Encoder,
    LookupTable,
    TokenVocabulary,
    UnknownEntityError,
    build_encoder,
    tokenize,
)
from .graph import MODALITIES, KnowledgeGraph


@dataclass
class ModelSpec:
    scorer: str = "rotate"
    dim: int = 32
    # modality name -> encoder kind; modalities absent here use lookup rows
    encoders: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ENCODER))
    token_dim: int | None = None
    text_layers: int = 1
    text_hidden: int | None = None
    max_len: int = MAX_TEXT_LEN

    def __post_init__(self):
        self.scorer = scoring.check_kind(self.scorer)
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        for mod, kind in self.encoders.items():
            if mod not in MODALITIES:
                raise ValueError(f"unknown modality {mod!r}; registered: {', '.join(MODALITIES)}")
            if kind not in ENCODER_KINDS:
                raise ValueError(f"unknown encoder kind {kind!r} for modality {mod!r}")

    @property
    def entity_width(self) -> int:
        return scoring.entity_width(self.scorer, self.dim)

    @property
    def relation_width(self) -> int:
        return scoring.relation_width(self.scorer, self.dim)

    @property
    def tokens_width(self) -> int:
        return self.token_dim or 2 * self.dim

    def lookup_only(self) -> "ModelSpec":
        d = asdict(self)
        d["encoders"] = {}
        return ModelSpec(**d)

    def to_dict(self) -> dict:
        return asdict(self)


GradDict = dict[str, object]


class ModelState:
    """Parameters of a model over a fixed entity/relation vocabulary.

    ``entities`` fixes the candidate order used in ranking. Each entity is
    embedded either by a lookup row or by the encoder of its modality.
    """

    def __init__(self, spec: ModelSpec, entities, relations, lookup: LookupTable,
                 encoders: Mapping[str, Encoder], vocabs: Mapping[str, TokenVocabulary],
                 attributes: Mapping[str, tuple[str, str]]):
        self.spec = spec
        self.entities = tuple(entities)
        self.relations = tuple(relations)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        self.lookup = lookup
        self.encoders = dict(encoders)
        self.vocabs = dict(vocabs)
        # entity -> (modality, payload) for encoder-embedded entities only
        self.attributes = dict(attributes)
        self._tokens = {
            e: self.vocabs[m].encode(tokenize(m, p)) for e, (m, p) in self.attributes.items()
        }
        self.lookup_row = np.full(len(self.entities), -1, dtype=np.int64)
        for e, i in lookup.entity_index.items():
            self.lookup_row[self.entity_index[e]] = i
        for e in self.entities:
            if self.lookup_row[self.entity_index[e]] < 0 and e not in self.attributes:
                raise UnknownEntityError(f"entity {e!r} has neither a lookup row nor attributes")

    @classmethod
    def build(cls, kg: KnowledgeGraph, spec: ModelSpec, seed: int = 0) -> "ModelState":
        rng = np.random.default_rng(seed)
        attributes = {
            e: (rec.modality, rec.payload)
            for e, rec in kg.attributes.items()
            if rec.modality in spec.encoders
        }
        lookup_ids = [e for e in kg.entities if e not in attributes]
        lookup = LookupTable.init(
            lookup_ids, list(kg.relations), spec.entity_width, spec.relation_width, rng,
            spec.dim, phases=spec.scorer == "rotate",
        )
        vocabs, encoders = {}, {}
        for mod in MODALITIES:
            if mod not in spec.encoders:
                continue
            payloads = [p for m, p in attributes.values() if m == mod]
            if not payloads:
                continue
            vocabs[mod] = TokenVocabulary.build(mod, payloads)
            encoders[mod] = build_encoder(
                spec.encoders[mod], mod, len(vocabs[mod]), spec.entity_width, spec.tokens_width,
                rng, spec.text_layers, spec.text_hidden, spec.max_len,
            )
        return cls(spec, kg.entities, kg.relations, lookup, encoders, vocabs, attributes)

    # -- parameters -------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.lookup.params())
        for enc in self.encoders.values():
            out.update(enc.params())
        return out

    def frozen(self) -> dict[str, np.ndarray]:
        out = {}
        for enc in self.encoders.values():
            out.update(enc.frozen())
        return out

    def tokens(self, entity: str) -> list[int]:
        return self._tokens[entity]

    def modality_of(self, entity: str) -> int:
        rec = self.attributes.get(entity)
        return 0 if rec is None else MODALITIES.index(rec[0]) + 1

    # -- embeddings -------------------------------------------------------

    def embed(self, ent_idx, track: bool = False):
        """Packed embeddings of the entity indices ``ent_idx``.

        With ``track=True`` also returns ``backward(grad) -> GradDict`` that
        maps ``dL/dEmbeddings`` onto parameter gradients: lookup gradients are
        row-sparse ``(rows, values)`` pairs, encoder gradients are dense.
        """
        ent_idx = np.asarray(ent_idx, dtype=np.int64)
        out = np.empty((len(ent_idx), self.spec.entity_width))
        rows = self.lookup_row[ent_idx]
        is_lookup = rows >= 0
        out[is_lookup] = self.lookup.entity_rows[rows[is_lookup]]
        groups: dict[str, list[int]] = {}
        for pos in np.flatnonzero(~is_lookup):
            mod = self.attributes[self.entities[ent_idx[pos]]][0]
            groups.setdefault(mod, []).append(int(pos))
        tensors = {}
        for mod, positions in groups.items():
            enc = self.encoders[mod]
            batch = [self._tokens[self.entities[ent_idx[p]]] for p in positions]
            if track:
                leaves = enc.leaves(track=True)
                y = enc.forward(batch, leaves)
                tensors[mod] = (positions, y, leaves)
                out[positions] = y.detach().numpy()
            else:
                out[positions] = enc.encode(batch)
        if not track:
            return out

        def backward(grad: np.ndarray) -> GradDict:
            grads: GradDict = {}
            if is_lookup.any():
                grads["lookup.entities"] = (rows[is_lookup], grad[is_lookup])
            for mod, (positions, y, leaves) in tensors.items():
                y.backward(torch.from_numpy(np.ascontiguousarray(grad[positions])))
                for name, leaf in leaves.items():
                    grads[name] = leaf.grad.numpy().copy() if leaf.grad is not None \
                        else np.zeros(leaf.shape)
            return grads

        return out, backward

    def embed_all(self, chunk: int = 512) -> np.ndarray:
        n = len(self.entities)
        parts = [self.embed(np.arange(i, min(i + chunk, n))) for i in range(0, n, chunk)]
        return np.concatenate(parts) if parts else np.empty((0, self.spec.entity_width))

    def relation_matrix(self) -> np.ndarray:
        return self.lookup.relation_rows

    def score(self, triples) -> np.ndarray:
        """Scores of index triples ``(m, 3)``."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        uniq, inv = np.unique(np.concatenate([triples[:, 0], triples[:, 2]]), return_inverse=True)
        emb = self.embed(uniq)
        m = len(triples)
        h, t = emb[inv[:m]], emb[inv[m:]]
        return scoring.score_packed(self.spec.scorer, h, self.lookup.relation_rows[triples[:, 1]], t)


def emb(entity: str, model: ModelState) -> np.ndarray:
    """Embedding of ``entity`` in the scorer's space (complex for ComplEx/RotatE)."""
    if entity not in model.entity_index:
        raise UnknownEntityError(f"entity {entity!r} is not registered in the model")
    x = model.embed([model.entity_index[entity]])[0]
    return x if model.spec.scorer == "transe" else scoring.unpack_complex(x)


def relation_embedding(relation: str, model: ModelState) -> np.ndarray:
    """Relation vector: real (TransE), complex (ComplEx) or phases (RotatE)."""
    try:
        x = model.lookup.relation_rows[model.relation_index[relation]].copy()
    except KeyError:
        raise UnknownEntityError(f"relation {relation!r} is not registered in the model") from None
    return scoring.unpack_complex(x) if model.spec.scorer == "complex" else x

