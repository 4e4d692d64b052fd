"""Multimodal knowledge graph embeddings with attribute encoders."""
from .graph import (
    MODALITIES,
    AttributeRecord,
    BenchmarkPairs,
    GraphFormatError,
    KnowledgeGraph,
    SplitBundle,
    attach_attributes,
    decouple_and_split,
    ingest_triples,
    load_benchmarks,
)
from .model import ModelSpec, ModelState, emb
from .scoring import score_complex, score_grad, score_rotate, score_transe
from .training import TrainConfig, pretrain_then_finetune, train
from .evaluation import evaluate, rank_triple, welch_test

__version__ = "0.1.0"

__all__ = [
    "MODALITIES", "AttributeRecord", "BenchmarkPairs", "GraphFormatError", "KnowledgeGraph",
    "SplitBundle", "attach_attributes", "decouple_and_split", "ingest_triples", "load_benchmarks",
    "ModelSpec", "ModelState", "emb", "score_complex", "score_grad", "score_rotate",
    "score_transe", "TrainConfig", "pretrain_then_finetune", "train", "evaluate", "rank_triple",
    "welch_test",
]
