import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from oracles import brute_auroc, central_diff, rel_err
from multikge.benchmark import (
    ClassifierSpec,
    EmbeddingSource,
    LogisticRegression,
    MLPClassifier,
    PairDataset,
    auprc,
    auroc,
    class_weights,
    classification_metrics,
    featurize,
    logistic_loss_grad,
    random_entity_vector,
    run_benchmark,
    sample_negatives,
    stratified_kfold,
    train_classifier,
    undersample,
)
from multikge.graph import BenchmarkPairs, attach_attributes, build_graph
from multikge.model import ModelSpec, ModelState


def typed_graph(n_drugs=30, n_prots=30, seed=0):
    rng = np.random.default_rng(seed)
    drugs = [f"d{i}" for i in range(n_drugs)]
    prots = [f"p{i}" for i in range(n_prots)]
    labeled = [(drugs[a], "binds", prots[b]) for a, b in rng.integers(0, [n_drugs, n_prots], (60, 2))]
    labeled += [(prots[i], "interacts", prots[(i + 1) % n_prots]) for i in range(n_prots)]
    types = {**{d: "drug" for d in drugs}, **{p: "protein" for p in prots}}
    return build_graph(labeled, types), drugs, prots


def positives(drugs, prots, n, seed=1):
    rng = np.random.default_rng(seed)
    out = set()
    while len(out) < n:
        out.add((drugs[rng.integers(len(drugs))], prots[rng.integers(len(prots))]))
    return sorted(out)


class TestNegatives:
    def test_count_and_prevalence(self):
        kg, drugs, prots = typed_graph(40, 40)
        pos = positives(drugs, prots, 100)
        pos = [p for p in pos if frozenset(p) not in {frozenset((kg.entities[h], kg.entities[t]))
                                                       for h, _, t in kg.triples}][:20]
        data = sample_negatives(pos, kg, 10, seed=0)
        assert len(data) == len(pos) * 11
        assert data.prevalence == pytest.approx(1 / 11)

    def test_hundred_positives(self):
        kg, drugs, prots = typed_graph(60, 60)
        data = sample_negatives(positives(drugs, prots, 100), kg, 10, 0)
        assert (data.labels == 0).sum() == 1000

    def test_hygiene(self):
        kg, drugs, prots = typed_graph()
        pos = positives(drugs, prots, 15)
        data = sample_negatives(pos, kg, 10, 3)
        kg_pairs = {frozenset((kg.entities[h], kg.entities[t])) for h, _, t in kg.triples}
        pos_set = {frozenset(p) for p in pos}
        negs = [frozenset((a, b)) for a, b, y in zip(data.left, data.right, data.labels) if y == 0]
        assert len(set(negs)) == len(negs)
        assert not (set(negs) & kg_pairs) and not (set(negs) & pos_set)
        # typed pools: negatives keep the drug / protein column order
        assert all(a.startswith("d") and b.startswith("p")
                   for a, b, y in zip(data.left, data.right, data.labels) if y == 0)

    def test_ratio_zero(self):
        kg, drugs, prots = typed_graph()
        data = sample_negatives(positives(drugs, prots, 5), kg, 0, 0)
        assert len(data) == 5 and data.labels.all()

    def test_exhausted_space(self):
        kg = build_graph([("a", "r", "x"), ("a", "r", "y"), ("b", "r", "x"), ("b", "r", "y")],
                         {"a": "drug", "b": "drug", "x": "protein", "y": "protein"})
        with pytest.raises(ValueError, match="deficit"):
            sample_negatives([("a", "x")], kg, 1, 0)

    def test_deterministic(self):
        kg, drugs, prots = typed_graph()
        pos = positives(drugs, prots, 10)
        a, b = sample_negatives(pos, kg, 5, 9), sample_negatives(pos, kg, 5, 9)
        assert a.left == b.left and a.right == b.right

    def test_benchmark_pairs_input(self):
        kg, drugs, prots = typed_graph()
        pairs = BenchmarkPairs(tuple((a, b, "DPI") for a, b in positives(drugs, prots, 4)))
        assert len(sample_negatives(pairs, kg, 2, 0)) == 12


class TestFeatures:
    def test_random_stable(self):
        data = PairDataset(["a", "a"], ["b", "c"], np.array([1, 0]), ["benchmark", "sampled"])
        fm = featurize(data, EmbeddingSource("random", dim=3), seed=4)
        assert np.array_equal(fm.X[0, :3], fm.X[1, :3])
        assert np.array_equal(fm.X[0, :3], random_entity_vector("a", 3, 4))

    def test_concatenation_width(self):
        data = PairDataset(["a"], ["b"], np.array([1]), ["benchmark"])
        assert featurize(data, EmbeddingSource("random", dim=2)).X.shape == (1, 4)

    def test_structural_imputation(self):
        kg = build_graph([("p1", "r", "p2"), ("p2", "r", "p3"), ("d", "r", "p1")],
                         {"p1": "protein", "p2": "protein", "p3": "protein", "d": "drug"})
        kg = attach_attributes(kg, records=[("p1", "protein", "MKV"), ("p2", "protein", "AAG"),
                                            ("d", "molecule", "CCO")])
        model = ModelState.build(kg, ModelSpec("rotate", 2, encoders={"protein": "mean", "molecule": "mean"}), 0)
        data = PairDataset(["d", "d"], ["p1", "p3"], np.array([1, 0]), ["benchmark", "sampled"])
        fm = featurize(data, EmbeddingSource("structural", model), 0, kg.entity_types)
        enc = model.encoders["protein"]
        v1 = enc.frozen_emb.matrix[model.tokens("p1")].mean(axis=0)
        v2 = enc.frozen_emb.matrix[model.tokens("p2")].mean(axis=0)
        w = fm.X.shape[1] // 2
        assert np.allclose(fm.X[0, w:], v1)
        assert np.allclose(fm.X[1, w:], (v1 + v2) / 2)
        assert fm.imputed == 1

    def test_unresolvable(self):
        kg = build_graph([("a", "r", "b")], {"a": "drug", "b": "protein"})
        kg = attach_attributes(kg, records=[("a", "molecule", "CO")])
        model = ModelState.build(kg, ModelSpec("rotate", 2, encoders={"molecule": "mean"}), 0)
        data = PairDataset(["a"], ["b"], np.array([1]), ["benchmark"])
        with pytest.raises(ValueError, match="impute"):
            featurize(data, EmbeddingSource("structural", model), 0, kg.entity_types)

    def test_model_source(self):
        kg, drugs, prots = typed_graph()
        model = ModelState.build(kg, ModelSpec("rotate", 3, encoders={}), 0)
        data = PairDataset([drugs[0]], [prots[1]], np.array([1]), ["benchmark"])
        fm = featurize(data, EmbeddingSource("kg_model", model))
        assert np.allclose(fm.X[0], np.concatenate(model.embed([kg.entity_index[drugs[0]],
                                                                kg.entity_index[prots[1]]])))


class TestFolds:
    def test_divisible_counts(self):
        y = np.array([1] * 10 + [0] * 100)
        folds = stratified_kfold(y, 5, 0)
        for f in range(5):
            assert (y[folds == f] == 1).sum() == 2 and (y[folds == f] == 0).sum() == 20

    def test_k_one_rejected(self):
        with pytest.raises(ValueError):
            stratified_kfold([0, 1, 0, 1], 1)

    def test_small_class_rejected(self):
        with pytest.raises(ValueError):
            stratified_kfold([1, 1] + [0] * 10, 5)

    @pytest.mark.parametrize("seed", range(5))
    def test_prevalence_within_one(self, seed):
        rng = np.random.default_rng(seed)
        y = (rng.random(137) < 0.2).astype(int)
        folds = stratified_kfold(y, 5, seed)
        assert sorted(np.unique(folds)) == list(range(5))
        for f in range(5):
            sel = folds == f
            assert abs(y[sel].sum() - y.mean() * sel.sum()) <= 1

    def test_deterministic(self):
        y = np.array([1] * 7 + [0] * 40)
        assert np.array_equal(stratified_kfold(y, 5, 3), stratified_kfold(y, 5, 3))


class TestMetrics:
    def test_perfect(self):
        m = classification_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert m.auroc == 1.0 and m.auprc == 1.0 and m.f1 == 1.0

    def test_hand_set(self):
        assert auroc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75)

    def test_auroc_brute_force(self):
        rng = np.random.default_rng(0)
        for n in range(2, 60):
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            s = rng.integers(0, 5, n) / 4
            assert auroc(s, y) == pytest.approx(brute_auroc(s, y), abs=1e-12)

    def test_auprc_matches_sklearn(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            y = rng.integers(0, 2, 40)
            if y.min() == y.max():
                continue
            s = rng.integers(0, 6, 40) / 5
            assert auprc(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)
            assert auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)

    def test_chance_level(self):
        rng = np.random.default_rng(2)
        y = np.array([1] * 909 + [0] * 9091)
        assert abs(auprc(rng.permutation(y).astype(float), y) - 1 / 11) < 0.02
        assert abs(auprc(rng.random(len(y)), y) - 1 / 11) < 0.02

    def test_single_class(self):
        with pytest.raises(ValueError):
            classification_metrics([0.1, 0.2], [1, 1])


class TestClassifiers:
    def test_lr_gradient(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(30, 4)), rng.integers(0, 2, 30).astype(float)
        w = class_weights(y)
        p = rng.normal(size=5)
        _, g = logistic_loss_grad(p, X, y, w, 0.3)
        num = central_diff(lambda q: logistic_loss_grad(q, X, y, w, 0.3)[0], p)
        assert rel_err(g, num) < 1e-6

    def test_separable_training_accuracy(self):
        rng = np.random.default_rng(1)
        X = np.r_[rng.normal(-3, 0.5, (20, 2)), rng.normal(3, 0.5, (20, 2))]
        y = np.r_[np.zeros(20), np.ones(20)]
        clf = LogisticRegression(l2=1e-4).fit(X, y)
        assert np.all((clf.predict_proba(X) >= 0.5) == y)

    def test_class_weight_mass(self):
        y = np.array([1] * 10 + [0] * 100)
        w = class_weights(y)
        assert w[y == 1].sum() == pytest.approx(w[y == 0].sum())

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            train_classifier(ClassifierSpec(), np.zeros((5, 2)), np.zeros(5))

    def test_undersample(self):
        y = np.array([1] * 5 + [0] * 50)
        idx = undersample(y, np.random.default_rng(0))
        assert (y[idx] == 1).sum() == 5 and (y[idx] == 0).sum() == 5

    def test_mlp_learns_xor(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, (400, 2))
        y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(float)
        clf = MLPClassifier(hidden=32, lr=0.02, epochs=150, batch_size=64).fit(X, y)
        assert auroc(clf.predict_proba(X), y) > 0.95

    def test_spec_balancing(self):
        assert ClassifierSpec("logistic_regression").balancing == "class_weights"
        assert ClassifierSpec("mlp").balancing == "undersample"

    def test_tuning_trials(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(100, 3))
        y = (X[:, 0] > 0.8).astype(int)
        _, hp, trials = train_classifier(ClassifierSpec(), X, y, 10, 0)
        assert len(trials) == 10
        assert hp == {"l2": max(trials, key=lambda t: t["valid_auprc"])["l2"]}


class TestRunBenchmark:
    def test_report_shape_and_determinism(self):
        kg, drugs, prots = typed_graph(40, 40)
        pos = positives(drugs, prots, 20)
        sources = {"random": EmbeddingSource("random", dim=8)}
        a = run_benchmark(pos, kg, sources, [ClassifierSpec()], k=5, ratio=5, seed=0, tuning_budget=2)
        b = run_benchmark(pos, kg, sources, [ClassifierSpec()], k=5, ratio=5, seed=0, tuning_budget=2)
        assert a.to_json() == b.to_json()
        assert len(a.folds["random/logistic_regression"]) == 5
        assert a.table().splitlines()[0].startswith("source\tclassifier\tauprc")
