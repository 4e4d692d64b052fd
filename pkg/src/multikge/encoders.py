"""Entity encoders: lookup tables and three attribute encoders.

Parameters are owned by numpy arrays. Forward passes wrap them in torch
float64 leaves (sharing memory), so optimizers and checkpoints operate on
plain arrays while gradients come from torch autograd.

Encoder kinds:

``mean``
    frozen token embeddings, averaged over the sequence, then an affine
    projection (protein stand-in).
``attention``
    frozen token embeddings of ``[BOS; tokens]``, one single-head
    self-attention layer, output at position 0, affine projection
    (molecule stand-in).
``text``
    trainable token embeddings, ``L`` blocks of self-attention plus a
    two-layer feed-forward net, both residual, output at position 0,
    affine projection (text stand-in). Inputs are truncated to ``max_len``
    tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

BOS, UNK = 0, 1
ENCODER_KINDS = ("mean", "attention", "text")
DEFAULT_ENCODER = {"protein": "mean", "molecule": "attention", "text": "text"}
MAX_TEXT_LEN = 64


class UnknownEntityError(KeyError):
    pass


def tokenize(modality: str, payload: str) -> list[str]:
    """Amino-acid and SMILES strings split per character; text per lowercased word."""
    if modality == "text":
        return payload.lower().split()
    return list(payload.strip())


class TokenVocabulary:
    """Token to index map with reserved ``<bos>`` (0) and ``<unk>`` (1)."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = ["<bos>", "<unk>"]
        self.stoi: dict[str, int] = {"<bos>": BOS, "<unk>": UNK}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, modality: str, payloads: Iterable[str]) -> "TokenVocabulary":
        # sorted so the vocabulary does not depend on payload order
        toks = sorted({tok for p in payloads for tok in tokenize(modality, p)})
        return cls(toks)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class FrozenTokenEmbeddings:
    matrix: np.ndarray

    @classmethod
    def random(cls, vocab_size: int, width: int, rng: np.random.Generator):
        return cls(rng.standard_normal((vocab_size, width)))

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ProjectionLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    @classmethod
    def init(cls, out_dim: int, in_dim: int, rng: np.random.Generator):
        return cls(_uniform(rng, (out_dim, in_dim), in_dim), _uniform(rng, out_dim, in_dim))

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class SelfAttentionLayer:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    @classmethod
    def init(cls, width: int, rng: np.random.Generator):
        return cls(*(_uniform(rng, (width, width), width) for _ in range(3)))

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}


@dataclass
class FeedForward:
    w1: np.ndarray  # (hidden, width)
    b1: np.ndarray
    w2: np.ndarray  # (width, hidden)
    b2: np.ndarray

    @classmethod
    def init(cls, width: int, hidden: int, rng: np.random.Generator):
        return cls(
            _uniform(rng, (hidden, width), width), _uniform(rng, hidden, width),
            _uniform(rng, (width, hidden), hidden), _uniform(rng, width, hidden),
        )

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class TextEncoderStack:
    token_embeddings: np.ndarray
    attention: list[SelfAttentionLayer] = field(default_factory=list)
    feed_forward: list[FeedForward] = field(default_factory=list)
    max_len: int = MAX_TEXT_LEN

    @classmethod
    def init(cls, vocab_size: int, width: int, layers: int, hidden: int,
             rng: np.random.Generator, max_len: int = MAX_TEXT_LEN):
        emb = _uniform(rng, (vocab_size, width), width)
        attn = [SelfAttentionLayer.init(width, rng) for _ in range(layers)]
        ffn = [FeedForward.init(width, hidden, rng) for _ in range(layers)]
        return cls(emb, attn, ffn, max_len)

    @property
    def layers(self) -> int:
        return len(self.attention)

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.tokens": self.token_embeddings}
        for i, (a, f) in enumerate(zip(self.attention, self.feed_forward)):
            out.update(a.params(f"{prefix}.block{i}.attn"))
            out.update(f.params(f"{prefix}.block{i}.ffn"))
        return out


# -- torch helpers ---------------------------------------------------------

def _leaf(arr: np.ndarray, track: bool) -> torch.Tensor:
    t = torch.from_numpy(arr)
    return t.requires_grad_(True) if track else t


def _pad(batch: Sequence[Sequence[int]], bos: bool, max_len: int | None = None):
    seqs = []
    for toks in batch:
        toks = list(toks)
        if not toks:
            raise ValueError("empty payload")
        if max_len is not None:
            toks = toks[:max_len]
        seqs.append([BOS] + toks if bos else toks)
    width = max(len(s) for s in seqs)
    idx = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = s
        mask[i, : len(s)] = True
    return torch.from_numpy(idx), torch.from_numpy(mask)


def _attend(x: torch.Tensor, mask: torch.Tensor, wq, wk, wv) -> torch.Tensor:
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(x.shape[-1])
    logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


def _project(x: torch.Tensor, weight, bias) -> torch.Tensor:
    return x @ weight.T + bias


class Encoder:
    """Base class: ``params()`` are trainable, ``frozen()`` are not."""

    kind: str

    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def frozen(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, batch: Sequence[Sequence[int]], leaves: Mapping[str, torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    def leaves(self, track: bool = True) -> dict[str, torch.Tensor]:
        return {k: _leaf(v, track) for k, v in self.params().items()}

    def encode(self, batch: Sequence[Sequence[int]]) -> np.ndarray:
        with torch.no_grad():
            return self.forward(batch, self.leaves(track=False)).numpy().copy()


class MeanEncoder(Encoder):
    kind = "mean"

    def __init__(self, frozen: FrozenTokenEmbeddings, proj: ProjectionLayer, name: str = "mean"):
        self.frozen_emb, self.proj, self.name = frozen, proj, name

    def params(self):
        return self.proj.params(f"{self.name}.proj")

    def frozen(self):
        return {f"{self.name}.frozen": self.frozen_emb.matrix}

    def pooled(self, batch: Sequence[Sequence[int]]) -> np.ndarray:
        rows = []
        for toks in batch:
            if len(toks) == 0:
                raise ValueError("empty payload")
            rows.append(self.frozen_emb.matrix[np.asarray(toks)].mean(axis=0))
        return np.stack(rows)

    def forward(self, batch, leaves):
        x = torch.from_numpy(self.pooled(batch))
        return _project(x, leaves[f"{self.name}.proj.weight"], leaves[f"{self.name}.proj.bias"])


class AttentionEncoder(Encoder):
    kind = "attention"

    def __init__(self, frozen: FrozenTokenEmbeddings, attn: SelfAttentionLayer,
                 proj: ProjectionLayer, name: str = "attention"):
        self.frozen_emb, self.attn, self.proj, self.name = frozen, attn, proj, name

    def params(self):
        return {**self.attn.params(f"{self.name}.attn"), **self.proj.params(f"{self.name}.proj")}

    def frozen(self):
        return {f"{self.name}.frozen": self.frozen_emb.matrix}

    def forward(self, batch, leaves):
        idx, mask = _pad(batch, bos=True)
        x = torch.from_numpy(self.frozen_emb.matrix)[idx]
        p = f"{self.name}.attn"
        h = _attend(x, mask, leaves[f"{p}.wq"], leaves[f"{p}.wk"], leaves[f"{p}.wv"])
        return _project(h[:, 0], leaves[f"{self.name}.proj.weight"], leaves[f"{self.name}.proj.bias"])


class TextEncoder(Encoder):
    kind = "text"

    def __init__(self, stack: TextEncoderStack, proj: ProjectionLayer, name: str = "text"):
        self.stack, self.proj, self.name = stack, proj, name

    def params(self):
        return {**self.stack.params(f"{self.name}.stack"), **self.proj.params(f"{self.name}.proj")}

    def forward(self, batch, leaves):
        idx, mask = _pad(batch, bos=True, max_len=self.stack.max_len)
        p = f"{self.name}.stack"
        x = leaves[f"{p}.tokens"][idx]
        for i in range(self.stack.layers):
            a = f"{p}.block{i}.attn"
            x = x + _attend(x, mask, leaves[f"{a}.wq"], leaves[f"{a}.wk"], leaves[f"{a}.wv"])
            f = f"{p}.block{i}.ffn"
            hidden = torch.relu(x @ leaves[f"{f}.w1"].T + leaves[f"{f}.b1"])
            x = x + hidden @ leaves[f"{f}.w2"].T + leaves[f"{f}.b2"]
        return _project(x[:, 0], leaves[f"{self.name}.proj.weight"], leaves[f"{self.name}.proj.bias"])


def build_encoder(kind: str, name: str, vocab_size: int, out_dim: int, token_dim: int,
                  rng: np.random.Generator, text_layers: int = 1,
                  text_hidden: int | None = None, max_len: int = MAX_TEXT_LEN) -> Encoder:
    proj = lambda: ProjectionLayer.init(out_dim, token_dim, rng)  # noqa: E731
    if kind == "mean":
        return MeanEncoder(FrozenTokenEmbeddings.random(vocab_size, token_dim, rng), proj(), name)
    if kind == "attention":
        frozen = FrozenTokenEmbeddings.random(vocab_size, token_dim, rng)
        return AttentionEncoder(frozen, SelfAttentionLayer.init(token_dim, rng), proj(), name)
    if kind == "text":
        stack = TextEncoderStack.init(vocab_size, token_dim, text_layers,
                                      text_hidden or 2 * token_dim, rng, max_len)
        return TextEncoder(stack, proj(), name)
    raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")


# -- lookup tables ---------------------------------------------------------

@dataclass
class LookupTable:
    entity_ids: list[str]
    entity_rows: np.ndarray
    relation_ids: list[str]
    relation_rows: np.ndarray

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        self.relation_index = {r: i for i, r in enumerate(self.relation_ids)}

    @classmethod
    def init(cls, entity_ids: Sequence[str], relation_ids: Sequence[str], entity_width: int,
             relation_width: int, rng: np.random.Generator, dim: int, phases: bool = False):
        bound = 6.0 / math.sqrt(dim)
        ent = rng.uniform(-bound, bound, size=(len(entity_ids), entity_width))
        if phases:
            rel = rng.uniform(0.0, 2 * math.pi, size=(len(relation_ids), relation_width))
        else:
            rel = rng.uniform(-bound, bound, size=(len(relation_ids), relation_width))
        return cls(list(entity_ids), ent, list(relation_ids), rel)

    def params(self) -> dict[str, np.ndarray]:
        return {"lookup.entities": self.entity_rows, "lookup.relations": self.relation_rows}


def encode_lookup(table: LookupTable, entity: str) -> np.ndarray:
    try:
        return table.entity_rows[table.entity_index[entity]].copy()
    except KeyError:
        raise UnknownEntityError(
            f"entity {entity!r} has no lookup row; lookup embeddings are undefined for unseen entities"
        ) from None


def encode_relation(table: LookupTable, relation: str) -> np.ndarray:
    try:
        return table.relation_rows[table.relation_index[relation]].copy()
    except KeyError:
        raise UnknownEntityError(f"relation {relation!r} has no lookup row") from None


def encode_sequence_mean(frozen: FrozenTokenEmbeddings, proj: ProjectionLayer,
                         tokens: Sequence[int]) -> np.ndarray:
    return MeanEncoder(frozen, proj).encode([tokens])[0]


def encode_sequence_attention(frozen: FrozenTokenEmbeddings, attn: SelfAttentionLayer,
                              proj: ProjectionLayer, tokens: Sequence[int]) -> np.ndarray:
    return AttentionEncoder(frozen, attn, proj).encode([tokens])[0]


def encode_text(stack: TextEncoderStack, proj: ProjectionLayer, tokens: Sequence[int]) -> np.ndarray:
    return TextEncoder(stack, proj).encode([tokens])[0]
