"""Checkpoint directories: ``manifest.json`` plus one little-endian float64
blob per named parameter group."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .encoders import LookupTable, TokenVocabulary, build_encoder
from .model import ModelSpec, ModelState
from .training import Checkpoint, TrainConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def save_checkpoint(ckpt: Checkpoint, directory: str | os.PathLike) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    model = ckpt.model
    groups = {}
    for frozen, arrays in ((False, model.params()), (True, model.frozen())):
        for name, arr in arrays.items():
            fname = f"{name}.bin"
            _write_blob(out / fname, arr)
            groups[name] = {"file": fname, "shape": list(arr.shape), "frozen": frozen}
    manifest = {
        "format": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "best_valid_mrr": ckpt.best_valid_mrr,
        "history": ckpt.history,
        "extra": ckpt.extra,
        "entities": list(model.entities),
        "relations": list(model.relations),
        "lookup_entities": list(model.lookup.entity_ids),
        "attributes": {e: list(v) for e, v in model.attributes.items()},
        "vocabs": {m: v.itos[2:] for m, v in model.vocabs.items()},
        "groups": groups,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_checkpoint(directory: str | os.PathLike) -> Checkpoint:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    spec = ModelSpec(**manifest["spec"])
    groups = manifest["groups"]

    def blob(name):
        g = groups[name]
        return _read_blob(d / g["file"], g["shape"])

    lookup = LookupTable(
        manifest["lookup_entities"], blob("lookup.entities"),
        manifest["relations"], blob("lookup.relations"),
    )
    vocabs = {m: TokenVocabulary(toks) for m, toks in manifest["vocabs"].items()}
    rng = np.random.default_rng(0)
    encoders = {}
    for mod, vocab in vocabs.items():
        enc = build_encoder(spec.encoders[mod], mod, len(vocab), spec.entity_width,
                            spec.tokens_width, rng, spec.text_layers, spec.text_hidden, spec.max_len)
        for name, arr in {**enc.params(), **enc.frozen()}.items():
            arr[...] = blob(name)
        encoders[mod] = enc
    attributes = {e: tuple(v) for e, v in manifest["attributes"].items()}
    model = ModelState(spec, manifest["entities"], manifest["relations"], lookup,
                       encoders, vocabs, attributes)
    return Checkpoint(
        model, TrainConfig.from_dict(manifest["config"]), manifest["step"],
        manifest["history"], manifest["best_valid_mrr"], manifest.get("extra", {}),
    )
