import dataclasses
import json

import numpy as np
import pytest

from rhco import pipeline
from rhco.numcore import ContractError, TrainingError
from rhco.pipeline import (
    CheckpointError,
    EvaluationError,
    Model,
    TrainingConfig,
    accuracy,
    bench_scaling,
    evaluate,
    export_embeddings,
    feature_baseline,
    load_checkpoint,
    loglog_slope,
    macro_f1,
    save_checkpoint,
    train,
)
from rhco.positive import build_positive_graphs, uniform_attention
from rhco.synthetic import generate_synthetic, regular_dataset

SMALL = TrainingConfig(d=8, d_rel=4, heads=2, batch_size=64, epochs=3, steps=10, seed=3)


@pytest.fixture(scope="module")
def fixture():
    ds = generate_synthetic(200, 40, 3, 0.9, 8, 1)
    return ds, build_positive_graphs(ds.graph, uniform_attention(ds.graph), 3, "paper")


def strip(log):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in log]


# -- configuration ------------------------------------------------------------------

def test_defaults():
    c = TrainingConfig()
    assert (c.d, c.d_rel, c.heads, c.layers, c.t_pos, c.dropout) == (64, 8, 8, 2, 5, 0.5)
    assert (c.tau, c.lam, c.alpha, c.steps, c.gamma) == (0.8, 0.5, 0.9, 50, 0.5)
    assert (c.batch_size, c.fanout, c.epochs, c.lr) == (512, 10, 150, 0.001)


@pytest.mark.parametrize("bad", [{"mode": "both"}, {"tau": 0.0}, {"alpha": 1.5}, {"gamma": 1.0},
                                 {"d": 10, "heads": 4}, {"batch_size": 0}])
def test_config_contract(bad):
    with pytest.raises((ContractError, ValueError)):
        TrainingConfig(**bad)


# -- training -----------------------------------------------------------------------

def test_zero_epochs_returns_initial_parameters(fixture):
    ds, pos = fixture
    cfg = dataclasses.replace(SMALL, epochs=0)
    ckpt, log = train(ds, pos, cfg)
    assert log == [] and ckpt.epoch == 0
    init = Model(ds, pos, cfg).params
    assert all(np.array_equal(init[k], ckpt.params[k]) for k in init)
    m = evaluate(ckpt, ds, pos)
    assert 0.0 <= m["accuracy"] <= 1.0


def test_same_seed_same_run(fixture):
    ds, pos = fixture
    a, la = train(ds, pos, SMALL)
    b, lb = train(ds, pos, SMALL)
    assert strip(la) == strip(lb) and a == b
    c, lc = train(ds, pos, dataclasses.replace(SMALL, seed=4))
    assert strip(lc) != strip(la)


def test_log_records(fixture, tmp_path):
    ds, pos = fixture
    path = tmp_path / "log.jsonl"
    _, log = train(ds, pos, SMALL, log_path=path)
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert rows == log
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    for r in rows:
        assert set(r) == {"epoch", "L_c", "L_v", "L", "val_accuracy", "wall_ms"}
        assert abs(r["L"] - (0.9 * r["L_c"] + 0.1 * r["L_v"])) < 1e-9 * max(1.0, r["L"])


@pytest.mark.parametrize("mode,frozen", [("sc", "pg."), ("pg", "sc.")])
def test_ablation_modes_leave_the_other_encoder_alone(fixture, mode, frozen, monkeypatch):
    ds, pos = fixture
    cfg = dataclasses.replace(SMALL, mode=mode, epochs=2)
    init = Model(ds, pos, cfg).params
    seen = {}

    class Spy(Model):
        def __init__(self, *a, **k):
            super().__init__(*a, **k)
            seen["params"] = self.params

    monkeypatch.setattr(pipeline, "Model", Spy)
    train(ds, pos, cfg)
    final = seen["params"]
    names = [k for k in init if k.startswith(frozen)]
    assert names and all(np.array_equal(init[k], final[k]) for k in names)
    assert any(not np.array_equal(init[k], final[k]) for k in init if not k.startswith(frozen))


def test_contrastive_loss_falls_without_labels():
    ds = generate_synthetic(300, 60, 3, 0.9, 8, 2)
    pos = build_positive_graphs(ds.graph, uniform_attention(ds.graph), 3, "paper")
    cfg = TrainingConfig(d=16, d_rel=4, heads=2, batch_size=64, epochs=10, steps=5, alpha=1.0, lr=0.005, seed=0)
    _, log = train(ds, pos, cfg)
    lc = np.array([r["L_c"] for r in log])
    smooth = np.convolve(lc, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 0) and lc[-1] < lc[0]


def test_divergence_names_the_batch(fixture):
    ds, pos = fixture
    with pytest.raises(TrainingError, match="batch"), np.errstate(all="ignore"):
        train(ds, pos, dataclasses.replace(SMALL, lr=1e250, epochs=5))


def test_interrupted_training_leaves_a_loadable_checkpoint(fixture, tmp_path):
    ds, pos = fixture
    path = tmp_path / "model.ckpt"

    def stop(rec):
        if rec["epoch"] == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(ds, pos, SMALL, checkpoint_path=path, on_epoch=stop)
    ckpt = load_checkpoint(path)
    assert ckpt.epoch <= 2
    evaluate(ckpt, ds, pos)


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(fixture, tmp_path):
    ds, pos = fixture
    ckpt, _ = train(ds, pos, SMALL)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back == ckpt
    m1, Y1 = evaluate(ckpt, ds, pos, return_predictions=True)
    m2, Y2 = evaluate(back, ds, pos, return_predictions=True)
    assert m1 == m2 and np.array_equal(Y1, Y2)


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_damaged_checkpoints(fixture, tmp_path, damage):
    ds, pos = fixture
    ckpt, _ = train(ds, pos, dataclasses.replace(SMALL, epochs=0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 9
    elif damage == "truncate":
        raw = raw[:-5]
    else:
        raw += b"\0"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_evaluation_checks_schema_and_positives(fixture):
    ds, pos = fixture
    ckpt, _ = train(ds, pos, dataclasses.replace(SMALL, epochs=0))
    other = generate_synthetic(200, 40, 3, 0.9, 6, 1)
    with pytest.raises(EvaluationError):
        evaluate(ckpt, other, pos)
    pos4 = build_positive_graphs(ds.graph, uniform_attention(ds.graph), 4, "paper")
    with pytest.raises(EvaluationError):
        evaluate(ckpt, ds, pos4)
    with pytest.raises(EvaluationError):
        evaluate(ckpt, ds, pos, split="holdout")


def test_embedding_export(fixture, tmp_path):
    ds, pos = fixture
    ckpt, _ = train(ds, pos, dataclasses.replace(SMALL, epochs=0))
    path = tmp_path / "emb.tsv"
    z = export_embeddings(ckpt, ds, pos, path)
    lines = path.read_text().splitlines()
    assert z.shape == (200, 8) and len(lines) == 200
    assert np.array_equal(np.array([[float(v) for v in l.split("\t")[1:]] for l in lines]), z)


# -- metrics -------------------------------------------------------------------------

def test_metric_cases():
    y = np.array([0, 1, 2] * 4)
    assert accuracy(y, y) == 1.0 and macro_f1(y, y, 3) == 1.0
    const = np.zeros_like(y)
    assert abs(accuracy(y, const) - 1 / 3) < 1e-15
    assert abs(macro_f1(y, const, 3) - (2 / (1 + 3)) / 3) < 1e-15


def test_metrics_on_frozen_predictions():
    # reference values from an independent implementation (scikit-learn, macro average, zero_division=0)
    rng = np.random.default_rng(2024)
    y = rng.integers(4, size=100)
    p = np.where(rng.random(100) < 0.6, y, rng.integers(4, size=100))
    p[p == 3] = 2
    assert accuracy(y, p) == 0.64
    assert abs(macro_f1(y, p, 4) - 0.5446195314119843) < 1e-15


def test_feature_baseline_beats_chance(fixture):
    ds, _ = fixture
    assert feature_baseline(ds, epochs=100)["accuracy"] > 0.5


# -- scaling benchmark ------------------------------------------------------------------

def test_loglog_slope():
    assert abs(loglog_slope([1, 2, 4, 8], [3, 6, 12, 24]) - 1.0) < 1e-12
    assert abs(loglog_slope([1, 2, 4], [5, 20, 80]) - 2.0) < 1e-12
    assert loglog_slope([5, 5, 5], [1.0, 1.1, 0.9]) == 0.0


def test_bench_rows_and_csv(tmp_path):
    path = tmp_path / "bench.csv"
    rows, slope = bench_scaling(lambda n: regular_dataset(n, 3), [100, 100, 100], repeats=1,
                                measure_epoch=True, csv_path=path,
                                cfg=dataclasses.replace(SMALL, epochs=1))
    assert slope == 0.0 and len(rows) == 3
    assert all(r["epoch_s"] > 0 and r["selection_s"] > 0 for r in rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "size,edges,selection_s,epoch_s" and len(lines) == 4
