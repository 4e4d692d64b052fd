import json

import numpy as np
import pytest

from multikge.checkpoint import load_checkpoint, save_checkpoint
from multikge.graph import decouple_and_split
from multikge.model import ModelSpec, ModelState
from multikge.synthetic import make_synthetic_kg
from multikge.training import TrainConfig, train


@pytest.mark.parametrize("scorer,loss", [("rotate", "ce"), ("complex", "bce"), ("transe", "margin")])
def test_round_trip_scores(tmp_path, scorer, loss):
    kg = make_synthetic_kg(30, 0.6, 1)
    splits = decouple_and_split(kg, None, (0.8, 0.1, 0.1), 1)
    spec = ModelSpec(scorer, 6, text_layers=2)
    cfg = TrainConfig(learning_rate=0.2, loss=loss, epochs=3, batch_size=16, negatives=2)
    ck = train(splits, kg, cfg, ModelState.build(kg, spec, 0))
    save_checkpoint(ck, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    rng = np.random.default_rng(0)
    trip = np.stack([rng.integers(kg.num_entities, size=100), rng.integers(kg.num_relations, size=100),
                     rng.integers(kg.num_entities, size=100)], axis=1)
    assert np.array_equal(ck.model.score(trip), back.model.score(trip))
    assert back.config == ck.config and back.step == ck.step
    assert back.history == ck.history and back.best_valid_mrr == ck.best_valid_mrr
    for name, arr in {**ck.model.frozen(), **ck.model.params()}.items():
        blob = {**back.model.frozen(), **back.model.params()}[name]
        assert np.array_equal(arr, blob)


def test_layout(tmp_path):
    kg = make_synthetic_kg(20, 0.6, 0)
    splits = decouple_and_split(kg, None, (0.8, 0.1, 0.1), 0)
    ck = train(splits, kg, TrainConfig(epochs=1, batch_size=16), ModelState.build(kg, ModelSpec("rotate", 4), 0))
    out = save_checkpoint(ck, tmp_path / "ck")
    manifest = json.loads((out / "manifest.json").read_text())
    for name, g in manifest["groups"].items():
        raw = (out / g["file"]).read_bytes()
        assert len(raw) == 8 * int(np.prod(g["shape"]))
        arr = np.frombuffer(raw, dtype="<f8").reshape(g["shape"])
        src = {**ck.model.params(), **ck.model.frozen()}[name]
        assert np.array_equal(arr, src)
    assert manifest["groups"]["protein.frozen"]["frozen"] is True
    assert manifest["groups"]["lookup.entities"]["frozen"] is False


def test_bad_format(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": 99}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
