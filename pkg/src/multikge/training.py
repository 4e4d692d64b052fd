"""Losses, negative sampling, optimizers and the training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import scoring
from .evaluation import FilterIndex, evaluate
from .graph import KnowledgeGraph, SplitBundle
from .model import ModelSpec, ModelState

log = logging.getLogger(__name__)

LOSSES = ("margin", "bce", "ce")
BATCH_SIZES = (128, 256, 512, 1024)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient."""


# -- negative sampling -----------------------------------------------------

def corrupt(triple, num_entities: int, side: str = "uniform",
            rng: np.random.Generator | None = None) -> tuple[int, int, int]:
    """Replace the head or tail of ``triple`` by a different, uniformly drawn entity.

    ``num_entities`` may also be a ``KnowledgeGraph``.
    """
    if isinstance(num_entities, KnowledgeGraph):
        num_entities = num_entities.num_entities
    rng = rng or np.random.default_rng()
    out = corrupt_batch(np.asarray([triple], dtype=np.int64), num_entities, 1, side, rng)
    return tuple(int(x) for x in out[0, 0])  # type: ignore[return-value]


def corrupt_batch(triples: np.ndarray, num_entities: int, k: int, side: str,
                  rng: np.random.Generator) -> np.ndarray:
    """``k`` corruptions per triple, shape ``(B, k, 3)``."""
    if num_entities < 2:
        raise ValueError("corruption needs at least two entities")
    if side not in ("head", "tail", "uniform"):
        raise ValueError(f"unknown corruption side {side!r}")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    out = np.repeat(triples[:, None, :], k, axis=1)
    if side == "uniform":
        col = np.where(rng.random(out.shape[:2]) < 0.5, 0, 2)
    else:
        col = np.full(out.shape[:2], 0 if side == "head" else 2)
    orig = np.take_along_axis(out, col[..., None], axis=2)[..., 0]
    # draw from the other num_entities - 1 ids
    repl = rng.integers(0, num_entities - 1, size=orig.shape)
    repl = repl + (repl >= orig)
    np.put_along_axis(out, col[..., None], repl[..., None], axis=2)
    return out


# -- losses ----------------------------------------------------------------
# Each takes positive scores (B,) and negative scores (B, K) and returns the
# batch-mean loss with gradients w.r.t. both score arrays.

def _shape(pos, neg):
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    scalar = pos.ndim == 0
    pos = pos.reshape(-1)
    neg = neg.reshape(len(pos), -1)
    if neg.shape[1] == 0:
        raise ValueError("at least one negative is required")
    return pos, neg, scalar


def _out(value, d_pos, d_neg, scalar, neg_shape):
    if scalar:
        return float(value), float(d_pos[0]), d_neg.reshape(neg_shape)
    return float(value), d_pos, d_neg


def loss_margin(pos_score, neg_score, margin: float = 1.0):
    """``max(0, neg - pos + margin)``, averaged over negatives and batch."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    shape = np.shape(neg_score)
    pos, neg, scalar = _shape(pos_score, neg_score)
    b, k = neg.shape
    viol = neg - pos[:, None] + margin
    active = viol > 0
    value = np.sum(np.where(active, viol, 0.0)) / (b * k)
    d_neg = active / (b * k)
    d_pos = -d_neg.sum(axis=1)
    return _out(value, d_pos, d_neg.astype(np.float64), scalar, shape)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def loss_bce(pos_score, neg_scores):
    """``-log s(pos) - mean_k log(1 - s(neg_k))`` in softplus form."""
    shape = np.shape(neg_scores)
    pos, neg, scalar = _shape(pos_score, neg_scores)
    b, k = neg.shape
    value = (np.sum(_softplus(-pos)) + np.sum(_softplus(neg)) / k) / b
    d_pos = -_sigmoid(-pos) / b
    d_neg = _sigmoid(neg) / (k * b)
    return _out(value, d_pos, d_neg, scalar, shape)


def loss_ce(pos_score, neg_scores):
    """Softmax cross-entropy with the positive as target among ``{pos} + negatives``."""
    shape = np.shape(neg_scores)
    pos, neg, scalar = _shape(pos_score, neg_scores)
    b = len(pos)
    logits = np.concatenate([pos[:, None], neg], axis=1)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    value = np.sum(lse - pos) / b
    soft = np.exp(logits - lse[:, None])
    d_pos = (soft[:, 0] - 1.0) / b
    d_neg = soft[:, 1:] / b
    return _out(value, d_pos, d_neg, scalar, shape)


def compute_loss(kind: str, pos, neg, margin: float = 1.0):
    if kind == "margin":
        return loss_margin(pos, neg, margin)
    if kind == "bce":
        return loss_bce(pos, neg)
    if kind == "ce":
        return loss_ce(pos, neg)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


# -- optimizers ------------------------------------------------------------

def _check_finite(grads: Mapping[str, object]) -> None:
    for name, g in grads.items():
        vals = g[1] if isinstance(g, tuple) else g
        if not np.all(np.isfinite(vals)):
            raise TrainingError(f"non-finite gradient for parameter group {name!r}; step aborted")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, object],
             lr: float, reg: float = 0.0) -> Mapping[str, np.ndarray]:
    """In-place ``theta <- theta - lr * (grad + 2 * reg * theta)``.

    Only parameters present in ``grads`` are touched. A gradient is either a
    dense array or a ``(rows, values)`` pair for row-sparse updates; rows must
    be unique.
    """
    _check_finite(grads)
    for name, g in grads.items():
        p = params[name]
        if isinstance(g, tuple):
            rows, vals = g
            p[rows] -= lr * (vals + 2.0 * reg * p[rows])
        else:
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient shape {np.shape(g)} does not match {name} {p.shape}")
            p -= lr * (g + 2.0 * reg * p)
    return params


class SGD:
    def __init__(self, lr: float, reg: float = 0.0):
        self.lr, self.reg = lr, reg

    def step(self, params, grads):
        sgd_step(params, grads, self.lr, self.reg)

    def state(self) -> dict[str, np.ndarray]:
        return {}


class Adam:
    """Adaptive moment optimizer; row-sparse gradients update only their rows."""

    def __init__(self, lr: float, reg: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.reg, self.b1, self.b2, self.eps = lr, reg, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, np.ndarray] = {}

    def _slot(self, name, p):
        if name not in self.m:
            self.m[name] = np.zeros_like(p)
            self.v[name] = np.zeros_like(p)
            self.t[name] = np.zeros(p.shape[:1] if p.ndim else (), dtype=np.float64)

    def step(self, params, grads):
        _check_finite(grads)
        for name, g in grads.items():
            p = params[name]
            self._slot(name, p)
            if isinstance(g, tuple):
                rows, vals = g
            else:
                rows, vals = slice(None), g
            grad = vals + 2.0 * self.reg * p[rows]
            m, v, t = self.m[name], self.v[name], self.t[name]
            t[rows] += 1
            steps = t[rows].reshape((-1,) + (1,) * (p.ndim - 1)) if p.ndim > 1 else t[rows]
            m[rows] = self.b1 * m[rows] + (1 - self.b1) * grad
            v[rows] = self.b2 * v[rows] + (1 - self.b2) * grad ** 2
            mhat = m[rows] / (1 - self.b1 ** steps)
            vhat = v[rows] / (1 - self.b2 ** steps)
            p[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
            out[f"adam.t.{name}"] = np.atleast_1d(self.t[name])
        return out


# -- configuration ---------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    regularization: float = 0.0
    batch_size: int = 128
    loss: str = "ce"
    margin: float = 1.0
    negatives: int = 1
    epochs: int = 100
    max_steps: int | None = None
    eval_interval: int = 10  # epochs
    patience: int | None = 5  # evaluations without improvement; None disables
    optimizer: str = "sgd"
    corruption: str = "uniform"
    seed: int = 0

    def validate(self, scorer: str | None = None) -> list[str]:
        """Return a list of problems; empty when valid."""
        errs = []
        if not self.learning_rate >= 0:
            errs.append("learning_rate must be >= 0")
        if not self.regularization >= 0:
            errs.append("regularization must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.loss not in LOSSES:
            errs.append(f"loss must be one of {LOSSES}")
        if self.margin < 0:
            errs.append("margin must be >= 0")
        if self.negatives < 1:
            errs.append("negatives must be >= 1")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.eval_interval < 1:
            errs.append("eval_interval must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            errs.append("optimizer must be 'sgd' or 'adam'")
        if self.corruption not in ("head", "tail", "uniform"):
            errs.append("corruption must be head, tail or uniform")
        if scorer is not None and scoring.check_kind(scorer) == "transe" and self.loss != "margin":
            errs.append(f"loss {self.loss!r} is not used with transe; only 'margin' is allowed")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown training config keys: {', '.join(unknown)}")
        return cls(**d)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.regularization)
    return SGD(config.learning_rate, config.regularization)


@dataclass
class Checkpoint:
    model: ModelState
    config: TrainConfig
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best_valid_mrr: float | None = None
    extra: dict = field(default_factory=dict)


# -- one optimization step -------------------------------------------------

def batch_gradients(model: ModelState, pos: np.ndarray, neg: np.ndarray,
                    config: TrainConfig):
    """Loss of one batch and the gradients of every touched parameter group."""
    kind = model.spec.scorer
    b, k = neg.shape[:2]
    ents = np.concatenate([pos[:, 0], pos[:, 2], neg[..., 0].ravel(), neg[..., 2].ravel()])
    uniq, inv = np.unique(ents, return_inverse=True)
    emb, backward = model.embed(uniq, track=True)
    i_hp, i_tp = inv[:b], inv[b:2 * b]
    i_hn = inv[2 * b:2 * b + b * k].reshape(b, k)
    i_tn = inv[2 * b + b * k:].reshape(b, k)
    W_r = model.lookup.relation_rows
    rel = pos[:, 1]

    s_pos, dhp, drp, dtp = scoring.score_packed_grad(kind, emb[i_hp], W_r[rel], emb[i_tp])
    s_neg, dhn, drn, dtn = scoring.score_packed_grad(
        kind, emb[i_hn], W_r[neg[..., 1]], emb[i_tn])
    value, g_pos, g_neg = compute_loss(config.loss, s_pos, s_neg, config.margin)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value!r}")

    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, i_hp, g_pos[:, None] * dhp)
    np.add.at(d_emb, i_tp, g_pos[:, None] * dtp)
    np.add.at(d_emb, i_hn.ravel(), (g_neg[..., None] * dhn).reshape(b * k, -1))
    np.add.at(d_emb, i_tn.ravel(), (g_neg[..., None] * dtn).reshape(b * k, -1))

    rels = np.concatenate([rel, neg[..., 1].ravel()])
    r_uniq, r_inv = np.unique(rels, return_inverse=True)
    d_rel = np.zeros((len(r_uniq), W_r.shape[1]))
    np.add.at(d_rel, r_inv[:b], g_pos[:, None] * drp)
    np.add.at(d_rel, r_inv[b:], (g_neg[..., None] * drn).reshape(b * k, -1))

    grads = backward(d_emb)
    grads["lookup.relations"] = (r_uniq, d_rel)
    return value, grads


# -- training loop ---------------------------------------------------------

def _snapshot(model: ModelState) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.params().items()}


def _restore(model: ModelState, snap: Mapping[str, np.ndarray]) -> None:
    for k, v in model.params().items():
        v[...] = snap[k]


def train(splits: SplitBundle, kg: KnowledgeGraph | None, config: TrainConfig,
          model: ModelState, log_path=None,
          on_eval: Callable[[dict], None] | None = None) -> Checkpoint:
    """Mini-batch training with validation-based model selection.

    The returned checkpoint holds ``model`` restored to its best validation
    MRR (or the final state when there is no validation set). The history
    records per-epoch loss and every validation evaluation.
    """
    errs = config.validate(model.spec.scorer)
    if errs:
        raise ValueError("; ".join(errs))
    if kg is not None and tuple(kg.entities) != model.entities:
        raise ValueError("model entity vocabulary does not match the graph")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    params = model.params()
    known = FilterIndex(splits.all_known())
    train_triples = np.asarray(splits.train, dtype=np.int64)
    n_ent = len(model.entities)

    history: list[dict] = []
    best_mrr, best_snap, best_step = -math.inf, None, 0
    bad_evals = 0
    step = 0
    t0 = time.perf_counter()
    logf = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(rec):
        history.append(rec)
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")

    def validate(epoch):
        nonlocal best_mrr, best_snap, best_step, bad_evals
        if len(splits.valid) == 0:
            return False
        rep = evaluate(model, splits.valid, known)
        rec = {"event": "eval", "epoch": epoch, "step": step, "valid_mrr": rep.mrr,
               "wall": time.perf_counter() - t0}
        emit(rec)
        if on_eval:
            on_eval(rec)
        if rep.mrr > best_mrr:
            best_mrr, best_snap, best_step, bad_evals = rep.mrr, _snapshot(model), step, 0
        else:
            bad_evals += 1
        return config.patience is not None and bad_evals >= config.patience

    try:
        stop = validate(0)
        last_epoch = 0
        for epoch in range(1, config.epochs + 1):
            if stop or (config.max_steps is not None and step >= config.max_steps):
                break
            order = rng.permutation(len(train_triples))
            losses = []
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                pos = train_triples[order[start:start + config.batch_size]]
                neg = corrupt_batch(pos, n_ent, config.negatives, config.corruption, rng)
                value, grads = batch_gradients(model, pos, neg, config)
                opt.step(params, grads)
                losses.append(value)
                step += 1
            last_epoch = epoch
            if losses:
                emit({"event": "epoch", "epoch": epoch, "step": step,
                      "loss": float(np.mean(losses)), "wall": time.perf_counter() - t0})
            if epoch % config.eval_interval == 0:
                stop = validate(epoch)
        if history and history[-1].get("event") != "eval" and len(splits.valid):
            validate(last_epoch)
    finally:
        if logf:
            logf.close()

    if best_snap is not None:
        _restore(model, best_snap)
    return Checkpoint(model, config, step, history,
                      None if best_snap is None else best_mrr,
                      {"best_step": best_step, "wall_clock": time.perf_counter() - t0})


# -- two-stage pretraining -------------------------------------------------

def transfer_lookup(source: ModelState, target: ModelState) -> int:
    """Copy relation rows and the rows of entities that have a lookup row in both models.

    Returns the number of copied entity rows.
    """
    if source.spec.scorer != target.spec.scorer or source.spec.dim != target.spec.dim:
        raise ValueError(
            f"cannot transfer {source.spec.scorer}/{source.spec.dim} "
            f"embeddings into {target.spec.scorer}/{target.spec.dim}"
        )
    if source.relations != target.relations:
        raise ValueError("relation vocabularies differ")
    target.lookup.relation_rows[...] = source.lookup.relation_rows
    copied = 0
    for e, row in target.lookup.entity_index.items():
        src = source.lookup.entity_index.get(e)
        if src is not None:
            target.lookup.entity_rows[row] = source.lookup.entity_rows[src]
            copied += 1
    return copied


def pretrain_then_finetune(splits: SplitBundle, kg: KnowledgeGraph, config_stage1: TrainConfig,
                           config_stage2: TrainConfig, model_spec: ModelSpec, seed: int = 0,
                           stage1: Checkpoint | None = None, log_path=None):
    """Stage 1 trains lookup embeddings for every entity; stage 2 trains the
    attribute model initialized from them.

    Returns ``(stage1_checkpoint, stage2_checkpoint, timing)``.
    """
    timing = {}
    if stage1 is None:
        m1 = ModelState.build(kg, model_spec.lookup_only(), seed)
        t = time.perf_counter()
        stage1 = train(splits, kg, config_stage1, m1, log_path)
        timing["stage1"] = {"wall_clock": time.perf_counter() - t, "steps": stage1.step}
    m2 = ModelState.build(kg, model_spec, seed)
    transfer_lookup(stage1.model, m2)
    t = time.perf_counter()
    stage2 = train(splits, kg, config_stage2, m2, log_path)
    timing["stage2"] = {"wall_clock": time.perf_counter() - t, "steps": stage2.step}
    return stage1, stage2, timing


# -- hyperparameter search -------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple[float, float] = (1e-3, 1.0)
    regularization: tuple[float, float] = (1e-6, 1e-3)
    batch_sizes: tuple[int, ...] = BATCH_SIZES
    transe_losses: tuple[str, ...] = ("margin",)
    complex_losses: tuple[str, ...] = ("bce", "ce")

    def losses_for(self, scorer: str) -> tuple[str, ...]:
        return self.transe_losses if scoring.check_kind(scorer) == "transe" else self.complex_losses


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_config(space: SearchSpace, scorer: str, rng: np.random.Generator,
                  base: TrainConfig | None = None) -> TrainConfig:
    cfg = copy.deepcopy(base) if base is not None else TrainConfig()
    cfg.learning_rate = _log_uniform(rng, *space.learning_rate)
    cfg.regularization = _log_uniform(rng, *space.regularization)
    cfg.batch_size = int(rng.choice(space.batch_sizes))
    losses = space.losses_for(scorer)
    cfg.loss = str(losses[rng.integers(len(losses))])
    return cfg


def hpo_search(space: SearchSpace, budget: int, seed: int, objective: Callable[[TrainConfig], float],
               scorer: str = "rotate", base: TrainConfig | None = None):
    """Seeded random search; returns ``(best_config, trials)``."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    best, best_value = None, -math.inf
    for i in range(budget):
        cfg = sample_config(space, scorer, rng, base)
        cfg.seed = int(rng.integers(2 ** 31))
        value = float(objective(cfg))
        trials.append({"trial": i, "config": cfg.to_dict(), "valid_mrr": value})
        if best is None or value > best_value:
            best, best_value = cfg, value
    return best, trials
