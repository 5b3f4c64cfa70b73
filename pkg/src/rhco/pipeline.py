"""Training, evaluation, checkpoints and the scaling benchmark."""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .hetgraph import Dataset
from .numcore import AdamState, ContractError, Tape, TrainingError, adam_step, glorot
from .objective import classification_loss, classify, contrastive_loss, init_head_params, project, total_loss
from .pg_encoder import all_target_means, encode_pg, init_pg_params
from .positive import OVERALL, PositiveGraphs, build_positive_graphs, uniform_attention
from .propagation import PropagationOperator, base_prediction, normalized_adjacency, predict
from .sampling import expand_rows, sample_neighbors
from .schema_encoder import SchemaConfig, encode_schema, init_schema_params

MODES = ("full", "sc", "pg")


class EvaluationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingConfig:
    d: int = 64
    d_rel: int = 8
    heads: int = 8
    layers: int = 2
    t_pos: int = 5
    dropout: float = 0.5
    tau: float = 0.8
    lam: float = 0.5
    alpha: float = 0.9
    steps: int = 50
    gamma: float = 0.5
    batch_size: int = 512
    fanout: int = 10
    epochs: int = 150
    lr: float = 0.001
    seed: int = 0
    mode: str = "full"
    normalize_lv: bool = False
    semantic_scope: str = "batch"      # "batch" or "full"
    propagation: str = "inference"     # "inference" or "batch"
    eval_fanout: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.semantic_scope not in ("batch", "full"):
            raise ContractError(f"unknown semantic scope {self.semantic_scope!r}")
        if self.propagation not in ("inference", "batch"):
            raise ContractError(f"unknown propagation mode {self.propagation!r}")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        for name in ("lam", "alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        if self.batch_size < 1 or self.fanout < 1 or self.t_pos < 1 or self.epochs < 0:
            raise ContractError("batch_size, fanout and t_pos must be >= 1; epochs >= 0")
        self.schema()

    def schema(self) -> SchemaConfig:
        return SchemaConfig(self.d, self.d_rel, self.heads, self.layers, self.dropout)


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"RHCO"
VERSION = 1


def dataset_schema(ds: Dataset) -> dict:
    g = ds.graph
    return {
        "node_types": dict(g.node_types),
        "relations": [[r.name, r.src, r.dst] for r in g.relations],
        "feature_dims": {t: int(f.shape[1]) for t, f in ds.features.items()},
        "target_type": ds.target_type,
        "num_classes": int(ds.split.num_classes),
    }


@dataclass
class Checkpoint:
    params: dict
    config: TrainingConfig
    schema: dict
    fingerprints: dict = field(default_factory=dict)
    epoch: int = 0

    def __eq__(self, other):
        return (self.config == other.config and self.schema == other.schema
                and self.fingerprints == other.fingerprints and self.epoch == other.epoch
                and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically so an interrupted save never clobbers the previous file."""
    meta = json.dumps({"config": dataclasses.asdict(ckpt.config), "schema": ckpt.schema,
                       "fingerprints": ckpt.fingerprints, "epoch": ckpt.epoch},
                      sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        a = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        b = name.encode()
        parts += [struct.pack("<I", len(b)), b, struct.pack("<II", *a.shape), a.tobytes()]
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    version, mlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(take(mlen))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        rows, cols = struct.unpack("<II", take(8))
        params[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(params, TrainingConfig(**meta["config"]), meta["schema"], meta["fingerprints"],
                      meta["epoch"])


# -- model ------------------------------------------------------------------------

def init_params(ds: Dataset, positives: PositiveGraphs, cfg: TrainingConfig) -> dict:
    rng = np.random.default_rng([cfg.seed, 0])
    dims = {t: f.shape[1] for t, f in ds.features.items()}
    p = init_schema_params(ds.graph, dims, ds.target_type, cfg.schema(), rng)
    p.update(init_pg_params(positives.metapath_tags, dims[ds.target_type], cfg.d, rng))
    p.update(init_head_params(cfg.d, ds.split.num_classes, rng))
    return p


class Model:
    """Parameters plus everything fixed for a dataset: positives, operator, full-scope means."""

    def __init__(self, ds: Dataset, positives: PositiveGraphs, cfg: TrainingConfig, params=None):
        self.ds, self.positives, self.cfg = ds, positives, cfg
        self.params = init_params(ds, positives, cfg) if params is None else params
        self.tags = positives.metapath_tags
        self.x = ds.features[ds.target_type]
        self.full_means = (all_target_means(positives, self.x, self.tags)
                           if cfg.semantic_scope == "full" else None)
        self._op = None

    @property
    def operator(self) -> PropagationOperator:
        if self._op is None:
            S = normalized_adjacency(self.positives.overall)
            self._op = PropagationOperator(S, self.cfg.gamma, self.cfg.steps)
        return self._op

    def views(self, tape, batch, rng):
        """(z_sc, z_pg) for the batch's extended targets, honouring the ablation mode."""
        mode = self.cfg.mode
        z_sc = z_pg = None
        if mode in ("full", "sc"):
            z_sc = encode_schema(tape, batch, self.ds.graph, self.ds.features, self.params,
                                 self.cfg.schema(), rng=rng)
        if mode in ("full", "pg"):
            z_pg = encode_pg(tape, batch, self.x, self.params, self.tags, self.full_means)
        return (z_sc if z_sc is not None else z_pg), (z_pg if z_pg is not None else z_sc)

    def batch_loss(self, tape, batch, rng):
        """Returns (L, L_c, L_v) tensors for one sampled batch of training seeds."""
        cfg = self.cfg
        z_sc, z_pg = self.views(tape, batch, rng)
        l_c = contrastive_loss(tape, project(tape, z_sc, self.params), project(tape, z_pg, self.params),
                               batch.seed_rows, batch.positive_mask(OVERALL), cfg.tau, cfg.lam)
        probs = classify(tape, z_sc, self.params)
        if cfg.propagation == "batch":
            probs = self._smooth_in_batch(tape, batch, probs)
        labels = self.ds.split.labels[batch.seeds]
        l_v = classification_loss(tape, probs, labels, batch.seed_rows, cfg.normalize_lv)
        return total_loss(tape, l_c, l_v, cfg.alpha), l_c, l_v

    def _smooth_in_batch(self, tape, batch, probs):
        samples, rows = batch.positive_edges[OVERALL]
        where = np.full(self.ds.graph.num_nodes(self.ds.target_type), -1)
        where[batch.targets] = np.arange(len(batch.targets))
        keep = where[samples] >= 0
        sub = SimpleNamespace(edges=lambda: (where[samples[keep]], rows[keep], None),
                              num_targets=len(batch.targets))
        S = normalized_adjacency(sub)
        base = tape.scale(probs, 1.0 - self.cfg.gamma)
        out = probs
        for _ in range(self.cfg.steps):
            out = tape.add(tape.scale(tape.spmm(S, out), self.cfg.gamma), base)
        return out

    def embed(self, fanout=None, view="auto", chunk=4096) -> np.ndarray:
        """Embeddings of every target node, computed without dropout."""
        n = self.ds.graph.num_nodes(self.ds.target_type)
        use_pg = view == "pg" or (view == "auto" and self.cfg.mode == "pg")
        if use_pg:
            tape = Tape(record=False)
            return encode_pg(tape, full_pg_batch(self.positives, np.arange(n)), self.x, self.params,
                             self.tags, self.full_means).value
        out = []
        for lo in range(0, n, chunk):
            ids = np.arange(lo, min(n, lo + chunk))
            batch = sample_neighbors(self.ds.graph, ids, fanout, self.cfg.layers, 0, self.ds.target_type)
            tape = Tape(record=False)
            out.append(encode_schema(tape, batch, self.ds.graph, self.ds.features, self.params,
                                     self.cfg.schema()).value)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.d))

    def predict(self, fanout=None):
        """Smoothed prediction matrix and argmax classes for every target."""
        z = self.embed(fanout)
        probs = classify(Tape(record=False), Tape(record=False).const(z), self.params).value
        G = base_prediction(probs, self.ds.split.labels, self.ds.split.train)
        return predict(G, self.operator)


def full_pg_batch(positives: PositiveGraphs, targets):
    edges = {}
    for tag, pg in positives.items():
        rows, samples, _, _ = expand_rows(pg.csr, targets)
        edges[tag] = (samples, rows)
    return SimpleNamespace(targets=targets, positive_edges=edges)


# -- metrics ------------------------------------------------------------------------

def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float((y_true == y_pred).mean()) if len(y_true) else 0.0


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no true or predicted rows scores 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        denom = np.sum(y_pred == c) + np.sum(y_true == c)
        f1[c] = 2.0 * tp / denom if denom else 0.0
    return float(f1.mean())


def split_rows(ds: Dataset, split: str):
    try:
        return getattr(ds.split, split)
    except AttributeError:
        raise EvaluationError(f"unknown split {split!r}") from None


def _metrics(ds, y_pred, split):
    rows = split_rows(ds, split)
    y = ds.split.labels[rows]
    return {"accuracy": accuracy(y, y_pred[rows]), "macro_f1": macro_f1(y, y_pred[rows], ds.split.num_classes)}


# -- training -----------------------------------------------------------------------

def _batches(rows, size, rng):
    perm = rng.permutation(rows)
    return [perm[i:i + size] for i in range(0, len(perm), size)]


def train(ds: Dataset, positives: PositiveGraphs, cfg: TrainingConfig, log_path=None,
          checkpoint_path=None, on_epoch=None):
    """Mini-batch training; returns ``(best_checkpoint, metrics_log)``.

    The checkpoint with the highest validation accuracy is kept (earliest on
    ties).  When ``checkpoint_path`` is given it is rewritten on every
    improvement, so an interrupted run leaves the last complete best model.
    """
    model = Model(ds, positives, cfg)
    schema = dataset_schema(ds)
    fp = {"positives": positives.fingerprint()}
    rng_order = np.random.default_rng([cfg.seed, 1])
    rng_drop = np.random.default_rng([cfg.seed, 2])
    state = AdamState(lr=cfg.lr)

    def snapshot(epoch):
        return Checkpoint({k: v.copy() for k, v in model.params.items()}, cfg, schema, fp, epoch)

    best = snapshot(0)
    best_val = _metrics(ds, model.predict(cfg.eval_fanout)[1], "valid")["accuracy"] if cfg.epochs else -1.0
    if checkpoint_path is not None:
        save_checkpoint(best, checkpoint_path)
    log = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums = np.zeros(3)
            batches = _batches(ds.split.train, cfg.batch_size, rng_order)
            for b, seeds in enumerate(batches):
                batch = sample_neighbors(ds.graph, seeds, cfg.fanout, cfg.layers,
                                         int(rng_order.integers(2**31)), ds.target_type, positives)
                tape = Tape()
                try:
                    loss, l_c, l_v = model.batch_loss(tape, batch, rng_drop)
                    grads = tape.backward(loss)
                    adam_step(model.params, grads, state)
                except TrainingError as e:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {e}") from None
                sums += [loss.value.item(), l_c.value.item(), l_v.value.item()]
            sums /= max(len(batches), 1)
            val = _metrics(ds, model.predict(cfg.eval_fanout)[1], "valid")["accuracy"]
            rec = {"epoch": epoch, "L_c": float(sums[1]), "L_v": float(sums[2]), "L": float(sums[0]),
                   "val_accuracy": val, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            log.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if val > best_val:
                best_val, best = val, snapshot(epoch)
                if checkpoint_path is not None:
                    save_checkpoint(best, checkpoint_path)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if log_file:
            log_file.close()
    return best, log


def evaluate(ckpt: Checkpoint, ds: Dataset, positives: PositiveGraphs, split="test", fanout=None,
             return_predictions=False):
    """Accuracy and macro-F1 of a checkpoint on one split, after smoothing."""
    if ckpt.schema != dataset_schema(ds):
        raise EvaluationError("checkpoint was trained on a different dataset schema")
    want = ckpt.fingerprints.get("positives")
    if want is not None and want != positives.fingerprint():
        raise EvaluationError("positive graphs differ from the ones used in training")
    model = Model(ds, positives, ckpt.config, ckpt.params)
    Y, y_pred = model.predict(fanout if fanout is not None else ckpt.config.eval_fanout)
    out = _metrics(ds, y_pred, split)
    return (out, Y) if return_predictions else out


def export_embeddings(ckpt: Checkpoint, ds: Dataset, positives: PositiveGraphs, path, fanout=None):
    """``node_id<TAB>z_0 .. z_{d-1}`` rows of schema-view embeddings."""
    z = Model(ds, positives, ckpt.config, ckpt.params).embed(fanout, view="sc" if ckpt.config.mode != "pg" else "pg")
    with open(path, "w", encoding="utf-8") as f:
        for i, row in enumerate(z):
            f.write("\t".join([str(i)] + [repr(float(v)) for v in row]) + "\n")
    return z


# -- baseline -----------------------------------------------------------------------

def feature_baseline(ds: Dataset, epochs=300, lr=0.01, seed=0):
    """Softmax regression on raw target features, best validation epoch; returns metrics dict."""
    x = ds.features[ds.target_type]
    split = ds.split
    rng = np.random.default_rng(seed)
    params = {"W": glorot(rng, x.shape[1], split.num_classes), "b": np.zeros((1, split.num_classes))}
    state = AdamState(lr=lr)
    onehot = np.eye(split.num_classes)[split.labels[split.train]]

    def scores(tape):
        return tape.add(tape.matmul(tape.const(x), tape.param(params, "W")), tape.param(params, "b"))

    best, best_val = None, -1.0
    for _ in range(epochs):
        tape = Tape()
        logits = tape.gather_rows(scores(tape), split.train)
        lse = tape.masked_logsumexp(logits, np.ones(onehot.shape, dtype=bool))
        loss = tape.mean(tape.sub(lse, tape.row_dot(logits, tape.const(onehot))))
        adam_step(params, tape.backward(loss), state)
        pred = scores(Tape(record=False)).value.argmax(axis=1)
        val = accuracy(split.labels[split.valid], pred[split.valid])
        if val > best_val:
            best_val, best = val, pred
    return _metrics(ds, best, "test")


# -- scaling benchmark ----------------------------------------------------------------

def loglog_slope(sizes, times) -> float:
    """Least-squares slope of log(time) on log(size); 0 when the sizes never change."""
    x, y = np.log(np.asarray(sizes, dtype=float)), np.log(np.asarray(times, dtype=float))
    if np.ptp(x) == 0:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def bench_scaling(make_dataset, sizes, cfg: TrainingConfig | None = None, repeats=3,
                  measure_epoch=False, csv_path=None):
    """Time positive selection (and optionally one epoch) across graph sizes.

    ``make_dataset(size)`` builds the graph; the minimum over ``repeats`` runs
    is reported.  Returns ``(rows, selection_slope)``.
    """
    cfg = cfg or TrainingConfig(epochs=1)
    rows = []
    for n in sizes:
        ds = make_dataset(n)
        table = uniform_attention(ds.graph)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            pos = build_positive_graphs(ds.graph, table, cfg.t_pos, ds.target_type)
            best = min(best, time.perf_counter() - t0)
        epoch_t = float("nan")
        if measure_epoch:
            c = dataclasses.replace(cfg, epochs=1)
            t0 = time.perf_counter()
            model = Model(ds, pos, c)
            state = AdamState(lr=c.lr)
            rng = np.random.default_rng(c.seed)
            for seeds in _batches(ds.split.train, c.batch_size, rng):
                batch = sample_neighbors(ds.graph, seeds, c.fanout, c.layers, 0, ds.target_type, pos)
                tape = Tape()
                loss, _, _ = model.batch_loss(tape, batch, rng)
                adam_step(model.params, tape.backward(loss), state)
            epoch_t = time.perf_counter() - t0
        rows.append({"size": int(n), "edges": int(ds.graph.num_edges()), "selection_s": best,
                     "epoch_s": epoch_t})
    slope = loglog_slope([r["edges"] for r in rows], [r["selection_s"] for r in rows])
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("size,edges,selection_s,epoch_s\n")
            for r in rows:
                f.write(f"{r['size']},{r['edges']},{r['selection_s']!r},{r['epoch_s']!r}\n")
    return rows, slope
