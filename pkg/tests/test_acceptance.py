"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest
import torch

from conftest import random_graph
from oracles import brute_auroc, brute_rank, central_diff, directional_diff, rel_err
from multikge.benchmark import (
    ClassifierSpec,
    EmbeddingSource,
    auroc,
    classification_metrics,
    run_benchmark,
    stratified_kfold,
    train_classifier,
)
from multikge.encoders import build_encoder
from multikge.evaluation import FilterIndex, evaluate, hits_at_k, mrr, rank_all, rank_triple, welch_test
from multikge.graph import BenchmarkPairs, attach_attributes, build_graph, decouple_and_split
from multikge.model import ModelSpec, ModelState
from multikge.scoring import pack_complex, score_packed, score_packed_grad
from multikge.synthetic import make_synthetic_kg
from multikge.training import (
    BATCH_SIZES,
    SearchSpace,
    TrainConfig,
    compute_loss,
    pretrain_then_finetune,
    sample_config,
    train,
)

RESULTS = []


def record(number, title, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail}; {elapsed:.1f}s of {limit}s)"
    RESULTS.append(line)
    print(line)
    return ok


# -- 1. gradient suite -----------------------------------------------------

def _scorer_instance(kind, rng, n=8):
    u = lambda: rng.uniform(-1, 1, n)
    if kind == "transe":
        return u(), u(), u()
    h, t = pack_complex(u() + 1j * u()), pack_complex(u() + 1j * u())
    r = pack_complex(u() + 1j * u()) if kind == "complex" else rng.uniform(0, 2 * np.pi, n)
    return h, r, t


def _scorer_errors(rng, count=200):
    worst = {}
    for kind in ("transe", "complex", "rotate"):
        errs = []
        for _ in range(count):
            args = _scorer_instance(kind, rng)
            _, *analytic = score_packed_grad(kind, *args)
            for slot in range(3):
                def f(x, slot=slot):
                    a = list(args)
                    a[slot] = x
                    return float(score_packed(kind, *a))
                errs.append(rel_err(analytic[slot], central_diff(f, args[slot])))
        worst[kind] = max(errs)
    return worst


def _loss_errors(rng, count=200):
    worst = {}
    for kind in ("margin", "bce", "ce"):
        errs = []
        for _ in range(count):
            b, k = rng.integers(1, 5), rng.integers(1, 5)
            pos, neg = rng.normal(size=b), rng.normal(size=(b, k))
            m = rng.uniform(0, 2)
            _, dp, dn = compute_loss(kind, pos, neg, m)
            errs.append(rel_err(np.r_[dp, dn.ravel()], np.r_[
                central_diff(lambda x: compute_loss(kind, x, neg, m)[0], pos),
                central_diff(lambda x: compute_loss(kind, pos, x, m)[0], neg).ravel()]))
        worst[kind] = max(errs)
    return worst


def _encoder_check(enc_params, forward, analytic, rng, coords=12, directions=2):
    """Worst relative error of ``analytic`` gradients over random directions and coordinates."""
    names = sorted(enc_params)
    errs = []

    def f_at(name, arr):
        def f(x):
            saved = arr.copy()
            arr[...] = x
            v = forward()
            arr[...] = saved
            return v
        return f

    for _ in range(directions):
        dirs = {n: rng.normal(size=enc_params[n].shape) for n in names}
        exact = sum(float(np.sum(analytic[n] * dirs[n])) for n in names)

        def along(eps):
            saved = {n: enc_params[n].copy() for n in names}
            for n in names:
                enc_params[n] += eps * dirs[n]
            v = forward()
            for n in names:
                enc_params[n][...] = saved[n]
            return v
        num = directional_diff(lambda e: along(float(e)), 0.0, 1.0)
        errs.append(rel_err(exact, num))
    sizes = np.array([enc_params[n].size for n in names])
    for _ in range(coords):
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = enc_params[n]
        idx = np.unravel_index(rng.integers(arr.size), arr.shape)
        f = f_at(n, arr)
        x = arr.copy()
        eps = 1e-5
        x[idx] += eps
        fp = f(x)
        x[idx] -= 2 * eps
        fm = f(x)
        num = (fp - fm) / (2 * eps)
        a = analytic[n][idx]
        # coordinates with a vanishing gradient are measured on an absolute scale
        errs.append(abs(a - num) / max(abs(a), abs(num), 1e-6))
    return max(errs)


def _encoder_errors(rng, count=200, n=8):
    worst = {}
    for kind in ("mean", "attention", "text"):
        errs = []
        for _ in range(count):
            vocab = int(rng.integers(4, 12))
            layers = int(rng.integers(1, 3))
            enc = build_encoder(kind, kind, vocab, n, 2 * n, rng, text_layers=layers)
            batch = [list(rng.integers(2, vocab, size=rng.integers(1, 7))) for _ in range(rng.integers(1, 4))]
            w = rng.normal(size=(len(batch), n))
            leaves = enc.leaves(track=True)
            (enc.forward(batch, leaves) * torch.from_numpy(w)).sum().backward()
            analytic = {k: v.grad.numpy().copy() for k, v in leaves.items()}
            errs.append(_encoder_check(enc.params(), lambda: float((enc.encode(batch) * w).sum()),
                                       analytic, rng))
        worst[kind] = max(errs)
    # lookup rows, through the model's sparse backward
    errs = []
    for i in range(count):
        kg = random_graph(i, 6, 10)
        model = ModelState.build(kg, ModelSpec("rotate", n, encoders={}), i)
        ids = rng.integers(kg.num_entities, size=4)
        w = rng.normal(size=(4, 2 * n))
        out, backward = model.embed(ids, track=True)
        rows, vals = backward(w)["lookup.entities"]
        dense = np.zeros_like(model.lookup.entity_rows)
        np.add.at(dense, rows, vals)
        errs.append(_encoder_check({"lookup.entities": model.lookup.entity_rows},
                                   lambda: float((model.embed(ids) * w).sum()),
                                   {"lookup.entities": dense}, rng))
    worst["lookup"] = max(errs)
    return worst


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    scorers = _scorer_errors(rng)
    losses = _loss_errors(rng)
    encoders = _encoder_errors(rng)
    elapsed = time.perf_counter() - t0
    ok = max(scorers.values()) < 1e-4 and max(losses.values()) < 1e-4 and max(encoders.values()) < 1e-3
    worst = {**scorers, **losses, **encoders}
    detail = "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(1, "gradient suite", ok, detail, elapsed, 60)


# -- 2. ranking oracle -----------------------------------------------------

def _oracle_model(seed):
    n_ent = int(np.random.default_rng(seed).integers(10, 51))
    n_tri = int(np.random.default_rng(seed + 1).integers(n_ent, min(300, n_ent * n_ent) + 1))
    kg = random_graph(seed, n_ent, n_tri, 1 + seed % 4)
    scorer = ("transe", "complex", "rotate")[seed % 3]
    rng = np.random.default_rng(seed)
    mods = ("protein", "molecule", "text")
    records = [(e, mods[i % 3], "".join(rng.choice(list("ACDEFG"), 5)) if i % 3 < 2 else "some words here")
               for i, e in enumerate(kg.entities[: n_ent // 3])]
    kg = attach_attributes(kg, records=records)
    model = ModelState.build(kg, ModelSpec(scorer, 4), seed)
    if seed % 2 == 0:
        # small integers force many exact ties among lookup entities
        model.lookup.entity_rows[...] = rng.integers(-1, 2, model.lookup.entity_rows.shape)
        if scorer != "rotate":
            model.lookup.relation_rows[...] = rng.integers(-1, 2, model.lookup.relation_rows.shape)
    return kg, model


def test_criterion_2_ranking_oracle():
    t0 = time.perf_counter()
    mismatches, checked, ties = 0, 0, 0
    for seed in range(20):
        kg, model = _oracle_model(seed)
        assert kg.num_entities <= 50 and len(kg) <= 300
        known = FilterIndex(kg.triples)
        oracle = {False: [], True: []}
        fast = {False: rank_all(model, kg.triples), True: rank_all(model, kg.triples, known)}
        for i, (h, r, t) in enumerate(kg.triples.tolist()):
            for side in (0, 1):
                cands = [(c, r, t) if side == 0 else (h, r, c) for c in range(kg.num_entities)]
                scores = model.score(np.array(cands)).tolist()
                true = h if side == 0 else t
                ties += scores.count(scores[true]) > 1
                for filtered in (False, True):
                    ex = known.known((h, r, t), side) if filtered else ()
                    want = brute_rank(scores, true, ex)
                    got = rank_triple(model, (h, r, t), side, known if filtered else None)
                    mismatches += (got != want) + (fast[filtered][i, side] != want)
                    oracle[filtered].append(want)
                    checked += 1
        for filtered in (False, True):
            ranks = fast[filtered].ravel()
            want = oracle[filtered]
            mismatches += mrr(ranks) != math.fsum(1.0 / w for w in want) / len(want)
            for k in (1, 3, 10):
                mismatches += hits_at_k(ranks, k) != sum(w <= k for w in want) / len(want)
            rep = evaluate(model, kg.triples, known if filtered else None)
            mismatches += rep.mrr != mrr(fast[filtered])
    elapsed = time.perf_counter() - t0
    detail = f"{checked} ranks checked, {ties} with ties, {mismatches} mismatches"
    assert record(2, "ranking oracle", mismatches == 0, detail, elapsed, 60)


# -- 3. split soundness ----------------------------------------------------

def test_criterion_3_split_soundness():
    t0 = time.perf_counter()
    violations = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n_ent = int(rng.integers(8, 40))
        kg0 = random_graph(seed, n_ent, int(rng.integers(n_ent, 4 * n_ent)), 3)
        labeled = kg0.labeled(kg0.triples)
        pairs = []
        for _ in range(int(rng.integers(1, 6))):
            a, b = rng.choice(n_ent, 2, replace=False)
            pairs.append((f"n{a}", f"n{b}", "T"))
            # inject co-occurrences in both orientations
            labeled.append((f"n{a}", "r0", f"n{b}"))
            labeled.append((f"n{b}", "r1", f"n{a}"))
        pairs.append(("absent_a", f"n{rng.integers(n_ent)}", "T"))
        kg = build_graph(labeled)
        split = decouple_and_split(kg, BenchmarkPairs(tuple(pairs)), (0.8, 0.1, 0.1), seed)
        bad = {frozenset((a, b)) for a, b, _ in pairs}
        for part in (split.train, split.valid, split.test):
            violations += sum(frozenset((h, t)) in bad for h, _, t in kg.labeled(part))
        removed = kg.labeled(split.removed)
        violations += sum(frozenset((h, t)) not in bad for h, _, t in removed)
        violations += sum(frozenset((h, t)) in bad for h, _, t in kg.labeled(kg.triples)) != len(removed)
        emitted = np.concatenate([split.train, split.valid, split.test, split.removed])
        violations += sorted(map(tuple, emitted.tolist())) != sorted(map(tuple, kg.triples.tolist()))
        train_ents = {e for h, _, t in kg.labeled(split.train) for e in (h, t)}
        held = kg.labeled(np.concatenate([split.valid, split.test]))
        violations += sum(h not in train_ents or t not in train_ents for h, _, t in held)
        again = decouple_and_split(kg, BenchmarkPairs(tuple(pairs)), (0.8, 0.1, 0.1), seed)
        violations += not all(np.array_equal(getattr(split, f), getattr(again, f))
                              for f in ("train", "valid", "test", "removed"))
    elapsed = time.perf_counter() - t0
    assert record(3, "split soundness", violations == 0, f"50 graphs, {violations} violations", elapsed, 30)


# -- 4. learning smoke test ------------------------------------------------

LEARN_SEED = 0


def random_baseline_mrr(num_entities, triples, known):
    """Expected MRR of uniformly random scores, computed exactly per (triple, side)."""
    vals = []
    for tr in triples:
        for side in (0, 1):
            true = tr[0] if side == 0 else tr[2]
            c = num_entities - len(known.known(tr, side) - {int(true)})
            vals.append(sum(1.0 / k for k in range(1, c + 1)) / c)
    return float(np.mean(vals))


def test_criterion_4_learning_smoke():
    t0 = time.perf_counter()
    kg = make_synthetic_kg(50, 0.6, LEARN_SEED)
    assert kg.num_relations == 3 and len(kg.attributes) == 30
    assert {r.modality for r in kg.attributes.values()} == {"protein", "molecule", "text"}
    splits = decouple_and_split(kg, None, (0.8, 0.1, 0.1), LEARN_SEED)
    known = FilterIndex(splits.all_known())
    model = ModelState.build(kg, ModelSpec("rotate", 32), LEARN_SEED)
    untrained = evaluate(model, splits.test, known).mrr
    baseline = max(random_baseline_mrr(kg.num_entities, splits.test, known), untrained)
    cfg = TrainConfig(learning_rate=0.5, loss="ce", negatives=16, batch_size=32,
                      epochs=200, eval_interval=10, patience=None, seed=LEARN_SEED)
    train(splits, kg, cfg, model)
    train_mrr = evaluate(model, splits.train, known).mrr
    test_mrr = evaluate(model, splits.test, known).mrr
    elapsed = time.perf_counter() - t0
    ok = train_mrr >= 0.5 and test_mrr >= 3 * baseline
    detail = (f"train MRR {train_mrr:.3f} >= 0.5, held-out MRR {test_mrr:.3f} >= 3 x {baseline:.3f}")
    assert record(4, "learning smoke test", ok, detail, elapsed, 600)


# -- 5. pretraining benefit ------------------------------------------------

def _evals(ck):
    return [(h["step"], h["valid_mrr"]) for h in ck.history if h["event"] == "eval"]


def test_criterion_5_pretraining_benefit():
    t0 = time.perf_counter()
    spec = ModelSpec("rotate", 32)
    reach_pre, reach_scratch, final_pre, final_scratch, pvals = [], [], [], [], []
    for seed in (0, 1, 2):
        kg = make_synthetic_kg(50, 0.6, seed)
        splits = decouple_and_split(kg, None, (0.8, 0.1, 0.1), seed)
        c1 = TrainConfig(learning_rate=0.5, loss="ce", negatives=16, batch_size=32,
                         epochs=200, eval_interval=10, patience=None, seed=seed)
        c2 = TrainConfig(learning_rate=0.5, loss="ce", negatives=16, batch_size=32,
                         epochs=100, eval_interval=5, patience=None, seed=seed)
        _, pre, _ = pretrain_then_finetune(splits, kg, c1, c2, spec, seed)
        pre_hist = _evals(pre)
        scratch = train(splits, kg, c2, ModelState.build(kg, spec, seed))
        scratch_hist = _evals(scratch)
        best = max(m for _, m in scratch_hist)
        reach_scratch.append(min(s for s, m in scratch_hist if m == best))
        reach_pre.append(next((s for s, m in pre_hist if m >= best), math.inf))
        final_pre.append(pre_hist[-1][1])
        final_scratch.append(scratch_hist[-1][1])
        known = FilterIndex(splits.all_known())
        rr_pre = 1.0 / rank_all(pre.model, splits.valid, known).ravel()
        rr_scratch = 1.0 / rank_all(scratch.model, splits.valid, known).ravel()
        pvals.append(welch_test(rr_pre, rr_scratch).p)
    elapsed = time.perf_counter() - t0
    med = lambda xs: float(np.median(xs))
    ok = med(reach_pre) < med(reach_scratch) and med(final_pre) >= med(final_scratch)
    detail = (f"median steps to scratch best {med(reach_pre):.0f} vs {med(reach_scratch):.0f}, "
              f"median final valid MRR {med(final_pre):.3f} vs {med(final_scratch):.3f}, "
              f"Welch p {', '.join(f'{p:.2g}' for p in pvals)}")
    assert record(5, "pretraining benefit", ok, detail, elapsed, 1800)


# -- 6. classifier calibration ---------------------------------------------

def test_criterion_6_classifier_calibration():
    t0 = time.perf_counter()
    n_side, n_pos = 1000, 909
    drugs = [f"d{i}" for i in range(n_side)]
    prots = [f"p{i}" for i in range(n_side)]
    rng = np.random.default_rng(6)
    labeled = [(drugs[a], "binds", prots[b]) for a, b in rng.integers(0, n_side, (500, 2))]
    kg = build_graph(labeled, {**{d: "drug" for d in drugs}, **{p: "protein" for p in prots}})
    pos = set()
    while len(pos) < n_pos:
        pos.add((drugs[rng.integers(n_side)], prots[rng.integers(n_side)]))
    report = run_benchmark(sorted(pos), kg, {"random": EmbeddingSource("random", dim=32)},
                           [ClassifierSpec()], k=5, ratio=10, seed=0, tuning_budget=10)
    chance = report.summary["random/logistic_regression"]["auprc"][0]

    # separable: two well separated Gaussian blobs
    y = np.r_[np.ones(300, dtype=int), np.zeros(3000, dtype=int)]
    X = rng.normal(size=(len(y), 16)) + 2.0 * y[:, None]
    folds = stratified_kfold(y, 5, 0)
    aucs = []
    for f in range(5):
        test = folds == f
        clf, _, _ = train_classifier(ClassifierSpec(), X[~test], y[~test], 10, f)
        aucs.append(classification_metrics(clf.predict_proba(X[test]), y[test]).auroc)
    elapsed = time.perf_counter() - t0
    ok = report.size == 9999 and abs(chance - 1 / 11) <= 0.05 and min(aucs) > 0.95
    detail = f"random AUPRC {chance:.4f} vs 0.0909 +/- 0.05 on {report.size} pairs, separable AUROC min {min(aucs):.4f}"
    assert record(6, "classifier-harness calibration", ok, detail, elapsed, 300)


# -- 7. statistical and metric oracles -------------------------------------

def test_criterion_7_stat_oracles():
    t0 = time.perf_counter()
    w = welch_test([1, 2, 3, 4, 5], [3, 4, 5, 6, 7])
    # reference: t = -2, dof = 8, two-sided p = 0.08052 from the t table
    welch_ok = abs(w.t + 2.0) < 1e-6 and abs(w.dof - 8.0) < 1e-6 and abs(w.p - 0.080516) < 1e-6
    rng = np.random.default_rng(7)
    worst, sets = 0.0, 0
    for n in range(2, 201):
        for _ in range(3):
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                y[0], y[-1] = 0, 1
            s = rng.integers(0, 8, n) / 7.0 if n % 2 else rng.normal(size=n)
            worst = max(worst, abs(auroc(s, y) - brute_auroc(s, y)))
            sets += 1
    elapsed = time.perf_counter() - t0
    detail = (f"welch t {w.t:.6f} dof {w.dof:.6f} p {w.p:.6f}; "
              f"AUROC max abs diff {worst:.1e} over {sets} sets")
    assert record(7, "statistical and metric oracles", welch_ok and worst <= 1e-6, detail, elapsed, 10)


# -- 8. HPO space conformance ----------------------------------------------

def test_criterion_8_hpo_space():
    t0 = time.perf_counter()
    space = SearchSpace()
    rng = np.random.default_rng(8)
    bad = 0
    for scorer in ("transe", "complex", "rotate"):
        for _ in range(1000):
            c = sample_config(space, scorer, rng)
            bad += not (1e-3 <= c.learning_rate <= 1.0)
            bad += not (1e-6 <= c.regularization <= 1e-3)
            bad += c.batch_size not in BATCH_SIZES
            if scorer == "transe":
                bad += c.loss != "margin"
            else:
                bad += c.loss not in ("bce", "ce")
    elapsed = time.perf_counter() - t0
    assert record(8, "HPO space conformance", bad == 0, f"3000 draws, {bad} out of range", elapsed, 5)
