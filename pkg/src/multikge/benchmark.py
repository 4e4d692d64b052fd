"""Pair classification benchmark on top of entity embeddings.

Positive pairs come from a benchmark file, negatives are sampled from the
cross product of the two column pools (excluding positives and any pair
linked in the graph). Pair features are concatenated entity vectors;
classifiers are scored with stratified k-fold cross-validation.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .graph import BenchmarkPairs, KnowledgeGraph
from .model import ModelState


# -- datasets --------------------------------------------------------------

@dataclass
class PairDataset:
    left: list[str]
    right: list[str]
    labels: np.ndarray
    provenance: list[str]  # "benchmark" or "sampled"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def prevalence(self) -> float:
        return float(np.mean(self.labels))


def _kg_pairs(kg: KnowledgeGraph) -> set[frozenset]:
    ents = kg.entities
    return {frozenset((ents[h], ents[t])) for h, _, t in kg.triples.tolist()}


def _pools(positives: Sequence[tuple[str, str]], kg: KnowledgeGraph):
    universe = sorted(set(kg.entities) | {e for p in positives for e in p})
    types = kg.entity_types
    if not types:
        return universe, universe
    pools = []
    for col in (0, 1):
        col_types = {types.get(p[col]) for p in positives}
        pool = [e for e in universe if types.get(e) in col_types]
        pools.append(pool)
    return pools[0], pools[1]


def sample_negatives(positives, kg: KnowledgeGraph, ratio: int = 10, seed: int = 0) -> PairDataset:
    """Positives plus ``ratio`` sampled negatives per positive.

    ``positives`` is a ``BenchmarkPairs`` or a sequence of ``(a, b)`` pairs.
    """
    if isinstance(positives, BenchmarkPairs):
        positives = [(a, b) for a, b, _ in positives.pairs]
    seen: set[frozenset] = set()
    left, right = [], []
    for a, b in positives:
        key = frozenset((a, b))
        if key not in seen:
            seen.add(key)
            left.append(a)
            right.append(b)
    n_pos = len(left)
    need = int(ratio) * n_pos
    forbidden = seen | _kg_pairs(kg)
    pool_a, pool_b = _pools(list(zip(left, right)), kg)
    rng = np.random.default_rng(seed)
    chosen: set[frozenset] = set()
    neg_l, neg_r = [], []
    attempts, max_attempts = 0, 100 * need + 1000
    while len(neg_l) < need and attempts < max_attempts:
        batch = max(64, 2 * (need - len(neg_l)))
        ia = rng.integers(len(pool_a), size=batch)
        ib = rng.integers(len(pool_b), size=batch)
        for i, j in zip(ia.tolist(), ib.tolist()):
            attempts += 1
            a, b = pool_a[i], pool_b[j]
            key = frozenset((a, b))
            if a == b or key in forbidden or key in chosen:
                continue
            chosen.add(key)
            neg_l.append(a)
            neg_r.append(b)
            if len(neg_l) == need:
                break
    if len(neg_l) < need:
        available = len({
            frozenset((a, b)) for a in pool_a for b in pool_b
            if a != b and frozenset((a, b)) not in forbidden
        })
        if available < need:
            raise ValueError(
                f"candidate space too small: {need} negatives requested, {available} available "
                f"(deficit {need - available})"
            )
        raise RuntimeError("negative sampling did not converge")
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(need, dtype=np.int64)])
    return PairDataset(left + neg_l, right + neg_r, labels,
                       ["benchmark"] * n_pos + ["sampled"] * need)


# -- features --------------------------------------------------------------

@dataclass
class EmbeddingSource:
    """How entities are turned into vectors.

    ``kind`` is one of ``random`` (seeded normal vectors of width ``dim``),
    ``structural`` (mean-pooled frozen token embeddings of the entity's
    attribute payload, taken from ``model``), ``kg_model`` or
    ``bioblp_model`` (the model's entity embeddings).
    """

    kind: str
    model: ModelState | None = None
    dim: int = 128


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    imputed: int = 0


def random_entity_vector(entity: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(entity.encode("utf-8")).digest()
    rng = np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])
    return rng.standard_normal(dim)


def _entity_vectors(entities: Sequence[str], source: EmbeddingSource, seed: int) -> dict[str, np.ndarray]:
    if source.kind == "random":
        return {e: random_entity_vector(e, source.dim, seed) for e in entities}
    model = source.model
    if model is None:
        raise ValueError(f"source {source.kind!r} needs a model")
    if source.kind == "structural":
        out = {}
        for e in entities:
            rec = model.attributes.get(e)
            if rec is None:
                continue
            enc = model.encoders[rec[0]]
            if not hasattr(enc, "frozen_emb"):
                continue
            toks = model.tokens(e)
            out[e] = enc.frozen_emb.matrix[np.asarray(toks)].mean(axis=0)
        return out
    if source.kind in ("kg_model", "bioblp_model"):
        known = [e for e in entities if e in model.entity_index]
        if not known:
            return {}
        vecs = model.embed([model.entity_index[e] for e in known])
        return dict(zip(known, vecs))
    raise ValueError(f"unknown feature source {source.kind!r}")


def featurize(dataset: PairDataset, source: EmbeddingSource, seed: int = 0,
              entity_types: Mapping[str, str] | None = None) -> FeatureMatrix:
    """Concatenate left and right entity vectors; impute missing ones by the
    mean vector of their entity type."""
    entity_types = entity_types or {}
    ents = sorted(set(dataset.left) | set(dataset.right))
    vecs = _entity_vectors(ents, source, seed)
    missing = [e for e in ents if e not in vecs]
    if missing:
        # type means run over every entity the source can embed, not just this dataset
        pool = dict(vecs)
        if source.model is not None:
            wanted = {entity_types.get(e) for e in missing}
            extra = [e for e in source.model.entities
                     if e not in pool and entity_types.get(e) in wanted]
            pool.update(_entity_vectors(extra, source, seed))
        by_type: dict[str | None, list[np.ndarray]] = {}
        for e, v in pool.items():
            by_type.setdefault(entity_types.get(e), []).append(v)
        means = {t: np.mean(vs, axis=0) for t, vs in by_type.items()}
        for e in missing:
            t = entity_types.get(e)
            if t not in means:
                raise ValueError(f"no features for entity {e!r} and no entities of type {t!r} to impute from")
            vecs[e] = means[t]
    X = np.stack([np.concatenate([vecs[a], vecs[b]]) for a, b in zip(dataset.left, dataset.right)])
    return FeatureMatrix(X, np.asarray(dataset.labels), len(missing))


# -- folds -----------------------------------------------------------------

def stratified_kfold(labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold id per instance; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ValueError(f"class {c!r} has {len(idx)} members, fewer than k={k}")
        idx = rng.permutation(idx)
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


# -- metrics ---------------------------------------------------------------

@dataclass
class ClassificationMetrics:
    auprc: float
    auroc: float
    precision: float
    recall: float
    f1: float


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("AUPRC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    # one operating point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("metrics need both classes in labels")
    pred = scores >= threshold
    tp = np.sum(pred & labels)
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / labels.sum()
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassificationMetrics(auprc(scores, labels), auroc(scores, labels),
                                 float(precision), float(recall), float(f1))


# -- classifiers -----------------------------------------------------------

def class_weights(labels) -> np.ndarray:
    """Per-instance weights inversely proportional to class frequency."""
    labels = np.asarray(labels)
    n = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    per_class = {c: n / (len(classes) * m) for c, m in zip(classes, counts)}
    return np.array([per_class[c] for c in labels])


def logistic_loss_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray,
                       weights: np.ndarray, l2: float):
    """Weighted mean log-loss plus ``l2 * |w|^2``; ``params = [w..., b]``."""
    w, b = params[:-1], params[-1]
    z = X @ w + b
    # log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0
    signed = np.where(y > 0, -z, z)
    wsum = weights.sum()
    loss = np.sum(weights * np.logaddexp(0.0, signed)) / wsum + l2 * (w @ w)
    p = 1.0 / (1.0 + np.exp(-z))
    r = weights * (p - y) / wsum
    grad = np.concatenate([X.T @ r + 2 * l2 * w, [r.sum()]])
    return loss, grad


class LogisticRegression:
    def __init__(self, l2: float = 1e-3, class_weight: bool = True, max_iter: int = 500):
        self.l2, self.class_weight, self.max_iter = l2, class_weight, max_iter

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(np.unique(y)) < 2:
            raise ValueError("training data contains a single class")
        self.mu = X.mean(axis=0)
        self.sd = X.std(axis=0)
        self.sd[self.sd == 0] = 1.0
        Z = (X - self.mu) / self.sd
        wts = class_weights(y) if self.class_weight else np.ones(len(y))
        res = optimize.minimize(
            logistic_loss_grad, np.zeros(X.shape[1] + 1), args=(Z, y, wts, self.l2),
            jac=True, method="L-BFGS-B", options={"maxiter": self.max_iter},
        )
        self.coef_, self.intercept_ = res.x[:-1], res.x[-1]
        return self

    def predict_proba(self, X):
        z = ((np.asarray(X, dtype=np.float64) - self.mu) / self.sd) @ self.coef_ + self.intercept_
        return 1.0 / (1.0 + np.exp(-z))


class MLPClassifier:
    """One hidden rectifier layer, trained with Adam on an undersampled set."""

    def __init__(self, hidden: int = 64, lr: float = 1e-2, l2: float = 1e-4,
                 epochs: int = 100, batch_size: int = 128, seed: int = 0):
        self.hidden, self.lr, self.l2 = hidden, lr, l2
        self.epochs, self.batch_size, self.seed = epochs, batch_size, seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(np.unique(y)) < 2:
            raise ValueError("training data contains a single class")
        rng = np.random.default_rng(self.seed)
        idx = undersample(y, rng)
        X, y = X[idx], y[idx]
        self.mu = X.mean(axis=0)
        self.sd = X.std(axis=0)
        self.sd[self.sd == 0] = 1.0
        X = (X - self.mu) / self.sd
        d = X.shape[1]
        p = {
            "W1": rng.uniform(-1, 1, (d, self.hidden)) / math.sqrt(d),
            "b1": np.zeros(self.hidden),
            "w2": rng.uniform(-1, 1, self.hidden) / math.sqrt(self.hidden),
            "b2": np.zeros(1),
        }
        m = {k: np.zeros_like(v) for k, v in p.items()}
        v = {k: np.zeros_like(v) for k, v in p.items()}
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(len(y))
            for s in range(0, len(y), self.batch_size):
                bi = order[s:s + self.batch_size]
                g = self._grads(p, X[bi], y[bi])
                t += 1
                for k in p:
                    m[k] = 0.9 * m[k] + 0.1 * g[k]
                    v[k] = 0.999 * v[k] + 0.001 * g[k] ** 2
                    p[k] -= self.lr * (m[k] / (1 - 0.9 ** t)) / (np.sqrt(v[k] / (1 - 0.999 ** t)) + 1e-8)
        self.params = p
        return self

    def _grads(self, p, X, y):
        h = X @ p["W1"] + p["b1"]
        a = np.maximum(h, 0)
        z = a @ p["w2"] + p["b2"][0]
        r = (1.0 / (1.0 + np.exp(-z)) - y) / len(y)
        dh = np.outer(r, p["w2"]) * (h > 0)
        return {
            "W1": X.T @ dh + 2 * self.l2 * p["W1"],
            "b1": dh.sum(axis=0),
            "w2": a.T @ r + 2 * self.l2 * p["w2"],
            "b2": np.array([r.sum()]),
        }

    def predict_proba(self, X):
        X = (np.asarray(X, dtype=np.float64) - self.mu) / self.sd
        p = self.params
        z = np.maximum(X @ p["W1"] + p["b1"], 0) @ p["w2"] + p["b2"][0]
        return 1.0 / (1.0 + np.exp(-z))


def undersample(y, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping every minority instance and as many majority ones."""
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    n = counts.min()
    keep = [rng.choice(np.flatnonzero(y == c), size=n, replace=False) for c in classes]
    return np.sort(np.concatenate(keep))


@dataclass
class ClassifierSpec:
    kind: str = "logistic_regression"
    # search ranges, log-uniform
    l2: tuple[float, float] = (1e-5, 1e-1)
    lr: tuple[float, float] = (1e-3, 3e-2)
    hidden: tuple[int, ...] = (16, 32, 64)
    epochs: int = 60

    def __post_init__(self):
        if self.kind not in ("logistic_regression", "mlp"):
            raise ValueError(f"unknown classifier {self.kind!r}")

    @property
    def balancing(self) -> str:
        return "class_weights" if self.kind == "logistic_regression" else "undersample"

    def sample(self, rng: np.random.Generator) -> dict:
        l2 = math.exp(rng.uniform(*np.log(self.l2)))
        if self.kind == "logistic_regression":
            return {"l2": l2}
        return {"l2": l2, "lr": math.exp(rng.uniform(*np.log(self.lr))),
                "hidden": int(rng.choice(self.hidden))}

    def build(self, hp: Mapping, seed: int):
        if self.kind == "logistic_regression":
            return LogisticRegression(l2=hp["l2"])
        return MLPClassifier(hidden=hp["hidden"], lr=hp["lr"], l2=hp["l2"],
                             epochs=self.epochs, seed=seed)


def _holdout(y, frac: float, rng: np.random.Generator):
    val = []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        val.append(idx[: max(1, int(round(frac * len(idx))))])
    val = np.sort(np.concatenate(val))
    mask = np.zeros(len(y), dtype=bool)
    mask[val] = True
    return np.flatnonzero(~mask), val


def train_classifier(spec: ClassifierSpec, X, y, tuning_budget: int = 10, seed: int = 0):
    """Tune on a 10% stratified hold-out by AUPRC, then refit on all of ``X``.

    Returns ``(fitted_classifier, best_hyperparameters, trials)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValueError("training data contains a single class")
    rng = np.random.default_rng(seed)
    tr, va = _holdout(y, 0.1, rng)
    trials = []
    best, best_score = None, -math.inf
    for _ in range(max(1, tuning_budget)):
        hp = spec.sample(rng)
        score = -math.inf
        if len(np.unique(y[tr])) == 2 and len(np.unique(y[va])) == 2:
            clf = spec.build(hp, seed).fit(X[tr], y[tr])
            score = auprc(clf.predict_proba(X[va]), y[va])
        trials.append({**hp, "valid_auprc": score})
        if best is None or score > best_score:
            best, best_score = hp, score
    return spec.build(best, seed).fit(X, y), best, trials


# -- protocol --------------------------------------------------------------

@dataclass
class BenchmarkReport:
    folds: dict[str, list[dict]] = field(default_factory=dict)  # "source/classifier" -> per fold
    summary: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)
    prevalence: float = 0.0
    size: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        """Rows of ``mean (std)`` per metric, tab-separated."""
        metrics = ("auprc", "auroc", "precision", "recall", "f1")
        lines = ["\t".join(("source", "classifier") + metrics)]
        for key, row in self.summary.items():
            source, clf = key.split("/", 1)
            cells = [f"{row[m][0]:.3f} ({row[m][1]:.3f})" for m in metrics]
            lines.append("\t".join([source, clf] + cells))
        return "\n".join(lines) + "\n"


def run_benchmark(pairs, kg: KnowledgeGraph, sources: Mapping[str, EmbeddingSource],
                  specs: Sequence[ClassifierSpec], k: int = 5, ratio: int = 10,
                  seed: int = 0, tuning_budget: int = 10) -> BenchmarkReport:
    """Cross-validated classification for every (source, classifier) pair.

    Negatives and folds are drawn once and shared across sources.
    """
    data = sample_negatives(pairs, kg, ratio, seed)
    folds = stratified_kfold(data.labels, k, seed)
    report = BenchmarkReport(prevalence=data.prevalence, size=len(data))
    for name, source in sources.items():
        feats = featurize(data, source, seed, kg.entity_types)
        for spec in specs:
            key = f"{name}/{spec.kind}"
            rows = []
            for f in range(k):
                test = folds == f
                clf, hp, _ = train_classifier(spec, feats.X[~test], feats.y[~test],
                                              tuning_budget, seed + f)
                m = classification_metrics(clf.predict_proba(feats.X[test]), feats.y[test])
                rows.append({"fold": f, "hyperparameters": hp, **asdict(m)})
            report.folds[key] = rows
            report.summary[key] = {
                m: (float(np.mean([r[m] for r in rows])), float(np.std([r[m] for r in rows], ddof=1)))
                for m in ("auprc", "auroc", "precision", "recall", "f1")
            }
    return report
