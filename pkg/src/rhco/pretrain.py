"""A small attention classifier whose edge attention seeds positive selection.

One attention layer over every relation of the full graph, followed by an
affine classifier on the target type.  Attention logits are dot products of
type-specific projections, so an edge scores the same in both directions of
a relation pair; relations that never feed the classifier still carry the
affinity learned through their reverse.
"""
from __future__ import annotations

import numpy as np

from .hetgraph import Dataset
from .numcore import AdamState, Tape, TrainingError, adam_step, glorot
from .positive import AttentionWeightTable


class PretrainingError(TrainingError):
    pass


def _block(d, k):
    """(d, k) 0/1 matrix summing each head's slice of a row."""
    return np.kron(np.eye(k), np.ones((d // k, 1)))


def init_pretrainer(dataset: Dataset, hidden=16, heads=2, rng_seed=0) -> dict:
    rng = np.random.default_rng(rng_seed)
    g, feats = dataset.graph, dataset.features
    p = {}
    for t in g.node_types:
        f = feats[t].shape[1]
        p[f"att.{t}"] = glorot(rng, f, hidden)
        p[f"val.{t}"] = glorot(rng, f, hidden)
    tt = dataset.target_type
    p["self"] = glorot(rng, feats[tt].shape[1], hidden)
    p["clf.W"] = glorot(rng, hidden, dataset.split.num_classes)
    p["clf.b"] = np.zeros((1, dataset.split.num_classes))
    return p


def _attention(tape, params, dataset, rel, heads, hidden):
    g, feats = dataset.graph, dataset.features
    r = g.relation(rel)
    src, dst = g.edges(rel)
    ks = tape.matmul(tape.const(feats[r.src]), tape.param(params, f"att.{r.src}"))
    qd = tape.matmul(tape.const(feats[r.dst]), tape.param(params, f"att.{r.dst}"))
    prod = tape.mul(tape.gather_rows(ks, src), tape.gather_rows(qd, dst))
    logits = tape.scale(tape.matmul(prod, tape.const(_block(hidden, heads))), 1.0 / np.sqrt(hidden // heads))
    return tape.segment_softmax(logits, dst, g.num_nodes(r.dst))


def _forward(tape, params, dataset, heads, hidden):
    g, feats = dataset.graph, dataset.features
    tt = dataset.target_type
    n = g.num_nodes(tt)
    terms = [tape.matmul(tape.const(feats[tt]), tape.param(params, "self"))]
    rels = [r for r in g.in_relations(tt) if g.num_edges(r.name)]
    for r in rels:
        src, dst = g.edges(r.name)
        alpha = _attention(tape, params, dataset, r.name, heads, hidden)
        v = tape.matmul(tape.const(feats[r.src]), tape.param(params, f"val.{r.src}"))
        msg = tape.mul(tape.gather_rows(v, src), tape.matmul(alpha, tape.const(_block(hidden, heads).T)))
        terms.append(tape.scale(tape.segment_sum(msg, dst, n), 1.0 / len(rels)))
    h = tape.elu(tape.add_n(terms))
    return tape.add(tape.matmul(h, tape.param(params, "clf.W")), tape.param(params, "clf.b"))


def _loss(tape, params, dataset, heads, hidden):
    split = dataset.split
    logits = tape.gather_rows(_forward(tape, params, dataset, heads, hidden), split.train)
    onehot = np.eye(split.num_classes)[split.labels[split.train]]
    lse = tape.masked_logsumexp(logits, np.ones(onehot.shape, dtype=bool))
    return tape.mean(tape.sub(lse, tape.row_dot(logits, tape.const(onehot))))


def export_attention(params, dataset: Dataset, heads=2, hidden=16) -> AttentionWeightTable:
    """Per-edge softmax attention averaged over heads, for every relation."""
    tape = Tape(record=False)
    out = {}
    for r in dataset.graph.relations:
        if dataset.graph.num_edges(r.name) == 0:
            out[r.name] = np.zeros(0)
            continue
        a = _attention(tape, params, dataset, r.name, heads, hidden).value
        out[r.name] = a.mean(axis=1)
    return AttentionWeightTable(dataset.graph, out)


def pretrain_attention(dataset: Dataset, epochs=100, rng_seed=0, *, hidden=16, heads=2,
                       lr=0.01, return_params=False):
    """Fit the classifier on the training split, then export its attention table."""
    if hidden % heads:
        raise ValueError("hidden must be divisible by heads")
    params = init_pretrainer(dataset, hidden, heads, rng_seed)
    state = AdamState(lr=lr)
    for _ in range(epochs):
        tape = Tape()
        try:
            loss = _loss(tape, params, dataset, heads, hidden)
            grads = tape.backward(loss)
            adam_step(params, grads, state)
        except TrainingError as e:
            raise PretrainingError(f"attention pretraining diverged at step {state.step}: {e}") from None
    table = export_attention(params, dataset, heads, hidden)
    return (table, params) if return_params else table
