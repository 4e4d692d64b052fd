"""Command line entry point: ``multikge <command> [options]``.

Run configurations are INI files with the sections ``[data]``, ``[model]``,
``[train]``, ``[stage1]``, ``[hpo]``. Relative data paths are resolved
against ``$MULTIKGE_DATA`` when it is set.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import graph
from .benchmark import ClassifierSpec, EmbeddingSource, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import (
    FilterIndex,
    degree_stratified_delta,
    evaluate,
    write_degree_tsv,
)
from .model import ModelSpec, ModelState
from .synthetic import write_synthetic
from .training import SearchSpace, TrainConfig, hpo_search, pretrain_then_finetune, train

log = logging.getLogger("multikge")

DATA_ROOT_ENV = "MULTIKGE_DATA"

DATA_KEYS = {"triples", "types", "attributes", "benchmarks", "split_dir"}
MODEL_KEYS = {"scorer", "dim", "encoders", "token_dim", "text_layers", "text_hidden", "max_len", "seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
HPO_KEYS = {"budget", "seed"}
SECTIONS = {"data": DATA_KEYS, "model": MODEL_KEYS, "train": TRAIN_KEYS,
            "stage1": TRAIN_KEYS, "hpo": HPO_KEYS}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------

def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _data_path(value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return str(p)


def read_run_config(path: str | os.PathLike) -> dict[str, dict]:
    """Parse an INI run config; every unknown section or key is reported at once."""
    cp = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    problems = []
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in cp.sections():
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            out[section][key] = _parse_value(raw)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return out


def model_spec(cfg: dict) -> ModelSpec:
    m = dict(cfg.get("model", {}))
    m.pop("seed", None)
    enc = m.pop("encoders", None)
    if enc is not None:
        pairs = [item.split(":") for item in str(enc).split(",") if item.strip()]
        m["encoders"] = {k.strip(): v.strip() for k, v in pairs}
    return ModelSpec(**m)


def train_config(section: dict, scorer: str, seed: int | None) -> TrainConfig:
    cfg = TrainConfig(**section)
    if seed is not None:
        cfg.seed = seed
    errs = cfg.validate(scorer)
    if errs:
        raise ConfigError("invalid training config: " + "; ".join(errs))
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _load_graph(data: dict) -> graph.KnowledgeGraph:
    kg = graph.ingest_triples(_data_path(data["triples"]), _data_path(data.get("types")))
    if data.get("attributes"):
        kg = graph.attach_attributes(kg, _data_path(data["attributes"]))
    return kg


def _setup(cfg_path: str, out: str, seed: int | None):
    cfg = read_run_config(cfg_path)
    if "triples" not in cfg["data"] or "split_dir" not in cfg["data"]:
        raise ConfigError("config needs data.triples and data.split_dir")
    spec = model_spec(cfg)
    model_seed = seed if seed is not None else cfg["model"].get("seed", 0) or 0
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kg = _load_graph(cfg["data"])
    splits = graph.load_split(kg, _data_path(cfg["data"]["split_dir"]))
    return cfg, spec, model_seed, out_dir, kg, splits


def _resolved(cfg, spec, extra=None) -> dict:
    d = {"data": cfg["data"], "model": spec.to_dict()}
    d.update(extra or {})
    return d


# -- commands --------------------------------------------------------------

def cmd_split(args) -> int:
    kg = graph.ingest_triples(_data_path(args.triples), _data_path(args.types))
    benchmarks = None
    if args.benchmarks:
        bpath = _data_path(args.benchmarks)
        if Path(bpath).exists():
            benchmarks = graph.load_benchmarks(bpath)
        else:
            log.warning("benchmark file %s not found; decoupling skipped", bpath)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    bundle = graph.decouple_and_split(kg, benchmarks, ratios, args.seed)
    out = graph.write_split(bundle, kg, args.out, args.seed, ratios,
                            {"benchmark_pairs": len(benchmarks) if benchmarks else 0})
    _write_json(out / "resolved_config.json", {
        "command": "split", "triples": args.triples, "types": args.types,
        "benchmarks": args.benchmarks, "ratios": list(ratios), "seed": args.seed,
    })
    print(json.dumps(bundle.counts(), sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg, spec, model_seed, out, kg, splits = _setup(args.config, args.out, args.seed)
    tc = train_config(cfg["train"], spec.scorer, args.seed)
    _write_json(out / "resolved_config.json", _resolved(cfg, spec, {"train": tc.to_dict(), "model_seed": model_seed}))
    model = ModelState.build(kg, spec, model_seed)
    ckpt = train(splits, kg, tc, model, out / "train_log.jsonl")
    save_checkpoint(ckpt, out / "checkpoint")
    _write_json(out / "metrics.json", {"best_valid_mrr": ckpt.best_valid_mrr, "steps": ckpt.step})
    return 0


def cmd_pretrain(args) -> int:
    cfg, spec, model_seed, out, kg, splits = _setup(args.config, args.out, args.seed)
    c2 = train_config(cfg["train"], spec.scorer, args.seed)
    c1 = train_config(cfg["stage1"] or cfg["train"], spec.scorer, args.seed)
    _write_json(out / "resolved_config.json", _resolved(cfg, spec, {
        "stage1": c1.to_dict(), "train": c2.to_dict(), "model_seed": model_seed}))
    s1, s2, timing = pretrain_then_finetune(splits, kg, c1, c2, spec, model_seed,
                                            log_path=out / "train_log.jsonl")
    save_checkpoint(s1, out / "stage1")
    save_checkpoint(s2, out / "stage2")
    _write_json(out / "timing.json", {
        **timing,
        "stage1_best_valid_mrr": s1.best_valid_mrr,
        "stage2_best_valid_mrr": s2.best_valid_mrr,
    })
    return 0


def cmd_hpo(args) -> int:
    cfg, spec, model_seed, out, kg, splits = _setup(args.config, args.out, None)
    base = train_config(cfg["train"], spec.scorer, None)
    budget = args.budget or cfg["hpo"].get("budget") or 10
    seed = args.seed if args.seed is not None else (cfg["hpo"].get("seed") or 0)

    def objective(tc: TrainConfig) -> float:
        ck = train(splits, kg, tc, ModelState.build(kg, spec, model_seed))
        return ck.best_valid_mrr if ck.best_valid_mrr is not None else float("nan")

    best, trials = hpo_search(SearchSpace(), int(budget), seed, objective, spec.scorer, base)
    _write_json(out / "resolved_config.json", _resolved(cfg, spec, {
        "train": base.to_dict(), "hpo": {"budget": budget, "seed": seed}}))
    with open(out / "trials.jsonl", "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    _write_json(out / "best_config.json", best.to_dict())
    return 0


def _read_eval_triples(model: ModelState, path: str) -> np.ndarray:
    labeled = graph.read_labeled_triples(_data_path(path))
    rows = []
    for h, r, t in labeled:
        if h not in model.entity_index or t not in model.entity_index or r not in model.relation_index:
            raise ValueError(f"triple ({h}, {r}, {t}) uses ids unknown to the checkpoint")
        rows.append((model.entity_index[h], model.relation_index[r], model.entity_index[t]))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def _known_triples(model: ModelState, split_dir: str) -> np.ndarray:
    d = Path(_data_path(split_dir))
    parts = [_read_eval_triples(model, str(d / f"{n}.tsv")) for n in ("train", "valid", "test")]
    return np.concatenate(parts)


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    triples = _read_eval_triples(ckpt.model, args.triples)
    flt = None
    if args.mode == "filtered":
        if not args.split_dir:
            raise ConfigError("--split-dir is required for filtered evaluation")
        flt = FilterIndex(_known_triples(ckpt.model, args.split_dir))
    report = evaluate(ckpt.model, triples, flt)
    text = report.to_json() + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text)
        _write_json(out / "resolved_config.json", {
            "command": "evaluate", "checkpoint": args.checkpoint, "triples": args.triples,
            "mode": args.mode, "split_dir": args.split_dir})
    else:
        sys.stdout.write(text)
    return 0


def cmd_analyze_degree(args) -> int:
    a = load_checkpoint(args.checkpoint_a).model
    b = load_checkpoint(args.checkpoint_b).model
    triples = _read_eval_triples(a, args.triples)
    types = graph.read_entity_types(_data_path(args.types))
    d = Path(_data_path(args.split_dir))
    train_triples = _read_eval_triples(a, str(d / "train.tsv"))
    flt = FilterIndex(_known_triples(a, args.split_dir))
    rows = degree_stratified_delta(a, b, triples, args.type, types, train_triples, flt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_degree_tsv(rows, out / "predict_target.tsv", "target")
    write_degree_tsv(rows, out / "predict_other.tsv", "other")
    _write_json(out / "resolved_config.json", {
        "command": "analyze-degree", "checkpoint_a": args.checkpoint_a,
        "checkpoint_b": args.checkpoint_b, "triples": args.triples, "type": args.type,
        "types": args.types, "split_dir": args.split_dir})
    return 0


def _parse_source(text: str, dim: int) -> tuple[str, EmbeddingSource]:
    name, _, rest = text.partition("=")
    kind, _, path = rest.partition(":")
    if not kind:
        raise ConfigError(f"bad --source {text!r}; expected name=kind[:checkpoint]")
    model = load_checkpoint(path).model if path else None
    return name, EmbeddingSource(kind, model, dim)


def cmd_benchmark(args) -> int:
    kg = graph.ingest_triples(_data_path(args.triples), _data_path(args.types))
    pairs = graph.load_benchmarks(_data_path(args.pairs))
    sources = dict(_parse_source(s, args.random_dim) for s in args.source)
    specs = [ClassifierSpec(kind=k) for k in args.classifier]
    report = run_benchmark(pairs, kg, sources, specs, k=args.k, ratio=args.ratio,
                           seed=args.seed, tuning_budget=args.trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "summary.tsv").write_text(report.table())
    _write_json(out / "resolved_config.json", {
        "command": "benchmark", "pairs": args.pairs, "triples": args.triples, "types": args.types,
        "sources": args.source, "classifiers": args.classifier, "k": args.k, "ratio": args.ratio,
        "seed": args.seed, "trials": args.trials, "random_dim": args.random_dim})
    return 0


def cmd_synth(args) -> int:
    write_synthetic(args.out, args.entities, args.coverage, args.seed, args.pairs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multikge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="decouple benchmarks and split triples")
    s.add_argument("--triples", required=True)
    s.add_argument("--types")
    s.add_argument("--benchmarks")
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    for name, func, help_ in (
        ("train", cmd_train, "train a model"),
        ("pretrain", cmd_pretrain, "lookup pretraining followed by attribute training"),
        ("hpo", cmd_hpo, "random hyperparameter search"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True)
        if name == "hpo":
            s.add_argument("--budget", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="link prediction metrics for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--mode", choices=("raw", "filtered"), default="filtered")
    s.add_argument("--split-dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze-degree", help="degree-stratified MRR difference of two checkpoints")
    s.add_argument("--checkpoint-a", required=True)
    s.add_argument("--checkpoint-b", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--type", required=True)
    s.add_argument("--types", required=True)
    s.add_argument("--split-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze_degree)

    s = sub.add_parser("benchmark", help="pair classification with cross-validation")
    s.add_argument("--pairs", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--types")
    s.add_argument("--source", action="append", required=True,
                   help="name=kind[:checkpoint], kind in random|structural|kg_model|bioblp_model")
    s.add_argument("--classifier", action="append", default=None,
                   choices=("logistic_regression", "mlp"))
    s.add_argument("--ratio", type=int, default=10)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--random-dim", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("synth", help="write a synthetic multimodal graph")
    s.add_argument("--entities", type=int, default=50)
    s.add_argument("--coverage", type=float, default=0.6)
    s.add_argument("--pairs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "classifier", "") is None:
        args.classifier = ["logistic_regression"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
