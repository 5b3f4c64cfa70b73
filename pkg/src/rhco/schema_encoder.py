"""Network-schema view: relation-aware attention over sampled typed neighbours.

Each layer keeps one state per (node, incoming relation).  A relation carries
its own vector, updated linearly from layer to layer, and that vector is what
scores the neighbours of the relation.  After ``L`` layers the relation states
of a target are fused by type-level attention.

Where a node serves as a *source* at layer ``l >= 2`` it has no state specific
to the relation being aggregated, so it contributes the mean of its own
relation states from the layer below.  Nodes that receive no relation at all
fall back to a chain of type projections of their features.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .hetgraph import HeteroGraph
from .numcore import DimensionError, Tape, Tensor, dropout_mask, glorot
from .sampling import MiniBatch


@dataclass(frozen=True)
class SchemaConfig:
    d: int = 64
    d_rel: int = 8
    heads: int = 8
    layers: int = 2
    dropout: float = 0.5

    def __post_init__(self):
        if self.d % self.heads:
            raise DimensionError(f"d={self.d} is not divisible by heads={self.heads}")


@lru_cache(maxsize=None)
def head_blocks(d: int, heads: int) -> np.ndarray:
    """(d, heads) indicator summing each head's slice of a width-``d`` row."""
    b = np.kron(np.eye(heads), np.ones((d // heads, 1)))
    b.flags.writeable = False
    return b


def init_schema_params(graph: HeteroGraph, feature_dims: dict, target_type: str, cfg: SchemaConfig,
                       rng: np.random.Generator) -> dict:
    p = {}
    n_rel = len(graph.relations)
    for l in range(1, cfg.layers + 1):
        for t in graph.node_types:
            fan_in = feature_dims[t] if l == 1 else cfg.d
            p[f"sc.W.{l}.{t}"] = glorot(rng, fan_in, cfg.d)
        for r in graph.relations:
            p[f"sc.Wrel.{l}.{r.name}"] = glorot(rng, n_rel if l == 1 else cfg.d_rel, cfg.d_rel)
            p[f"sc.Qs.{l}.{r.name}"] = glorot(rng, cfg.d_rel, cfg.d)
            p[f"sc.Qd.{l}.{r.name}"] = glorot(rng, cfg.d_rel, cfg.d)
    for r in graph.in_relations(target_type):
        p[f"sc.U.{r.name}"] = glorot(rng, cfg.d, cfg.d)
        p[f"sc.V.{r.name}"] = glorot(rng, cfg.d_rel, cfg.d)
    return p


# -- building blocks ------------------------------------------------------------

def project_inputs(tape: Tape, h, W) -> Tensor:
    """Type- or relation-specific linear map of row representations."""
    return tape.matmul(h, W)


def relation_attention_layer(tape: Tape, z_src, z_dst, z_rel, src, dst, n_dst, Qs, Qd, heads,
                             alpha_mask=None):
    """Multi-head attention of every target over its neighbours in one relation.

    ``z_src``/``z_dst`` are projected neighbour and target rows, ``src``/``dst``
    local edge endpoints.  The relation vector ``z_rel`` (1, d_rel) is mapped by
    ``Qs``/``Qd`` to the per-head attention vectors for the neighbour and
    target halves.  Returns ``(h, alpha)`` with ``h`` of shape (n_dst, d);
    targets without neighbours get zero rows.
    """
    d = z_src.shape[1]
    B = tape.const(head_blocks(d, heads))
    e_src = tape.matmul(tape.mul(z_src, tape.matmul(z_rel, Qs)), B)
    e_dst = tape.matmul(tape.mul(z_dst, tape.matmul(z_rel, Qd)), B)
    logits = tape.leaky_relu(tape.add(tape.gather_rows(e_src, src), tape.gather_rows(e_dst, dst)))
    alpha = tape.segment_softmax(logits, dst, n_dst)
    a = tape.dropout(alpha, alpha_mask) if alpha_mask is not None else alpha
    msg = tape.mul(tape.gather_rows(z_src, src), tape.matmul(a, tape.transpose(B)))
    return tape.elu(tape.segment_sum(msg, dst, n_dst)), alpha


def fuse_relations(tape: Tape, hs, z_rels, Us, Vs, valid: np.ndarray, fallback=None):
    """Type-level attention over a target's relation states.

    ``hs[i]`` is the (n, d) state under relation ``i`` and ``valid[:, i]`` says
    whether that relation is present for the row.  Rows with no valid relation
    get ``fallback`` (n, d) instead.  Returns ``(z, beta)``.
    """
    projected = [tape.matmul(h, U) for h, U in zip(hs, Us)]
    scores = [tape.leaky_relu(tape.sum_axis(tape.mul(a, tape.matmul(zr, V)), 1))
              for a, zr, V in zip(projected, z_rels, Vs)]
    beta = tape.masked_softmax(tape.concat(scores, axis=1), valid)
    k = len(hs)
    terms = [tape.mul(a, tape.matmul(beta, tape.const(np.eye(k)[:, [i]])))
             for i, a in enumerate(projected)]
    isolated = ~valid.any(axis=1)
    if fallback is not None and isolated.any():
        terms.append(tape.mul(fallback, tape.const(isolated[:, None].astype(float))))
    return tape.add_n(terms), beta


# -- the full view encoder ------------------------------------------------------

def _drop(tape, x, rng, p):
    m = dropout_mask(rng, x.shape, p)
    return x if m is None else tape.dropout(x, m)


def encode_schema(tape: Tape, batch: MiniBatch, graph: HeteroGraph, features: dict, params: dict,
                  cfg: SchemaConfig, rng=None, trace=None) -> Tensor:
    """Schema-view embeddings (n_targets, d) for the batch's extended targets.

    ``rng`` drives dropout (None disables it).  When ``trace`` is a dict it
    receives the node-level ``alpha`` per (layer, relation) and the type-level
    ``beta`` together with the relation order and validity mask.
    """
    if batch.num_layers != cfg.layers:
        raise DimensionError(f"batch has {batch.num_layers} layers, encoder expects {cfg.layers}")
    rel_index = {r.name: i for i, r in enumerate(graph.relations)}
    P = lambda name: tape.param(params, name)
    p = cfg.dropout if rng is not None else 0.0

    for t, ids in batch.nodes[0].items():
        if features[t].shape[1] != params[f"sc.W.1.{t}"].shape[0]:
            raise DimensionError(f"type {t!r}: features have {features[t].shape[1]} columns, "
                                 f"W expects {params[f'sc.W.1.{t}'].shape[0]}")
    selfrep = {t: tape.const(features[t][ids]) for t, ids in batch.nodes[0].items()}
    rel_state = {}                                   # relation -> (rows of nodes[l][dst], d)
    valid = {}                                       # relation -> bool rows
    z_rel = {r.name: tape.const(np.eye(len(graph.relations))[[rel_index[r.name]]])
             for r in graph.relations}

    for l in range(1, cfg.layers + 1):
        z_rel = {name: project_inputs(tape, z, P(f"sc.Wrel.{l}.{name}")) for name, z in z_rel.items()}
        z_src = {t: project_inputs(tape, _drop(tape, x, rng, p), P(f"sc.W.{l}.{t}"))
                 for t, x in selfrep.items()}
        new_state, new_valid = {}, {}
        for name, (src, dst) in batch.blocks[l - 1].items():
            r = graph.relation(name)
            n_dst = len(batch.nodes[l][r.dst])
            if l == 1:
                z_dst = tape.gather_rows(z_src[r.dst], np.arange(n_dst))
            else:
                prev = tape.gather_rows(rel_state[name], np.arange(n_dst))
                z_dst = project_inputs(tape, _drop(tape, prev, rng, p), P(f"sc.W.{l}.{r.dst}"))
            amask = dropout_mask(rng, (len(src), cfg.heads), p)
            h, alpha = relation_attention_layer(tape, z_src[r.src], z_dst, z_rel[name], src, dst, n_dst,
                                                P(f"sc.Qs.{l}.{name}"), P(f"sc.Qd.{l}.{name}"),
                                                cfg.heads, amask)
            new_state[name] = h
            new_valid[name] = np.bincount(dst, minlength=n_dst) > 0
            if trace is not None:
                trace.setdefault("alpha", {})[(l, name)] = (alpha.value, dst)

        new_self = {}
        for t, ids in batch.nodes[l].items():
            names = [n for n in new_state if graph.relation(n).dst == t]
            count = sum(new_valid[n].astype(float) for n in names) if names else np.zeros(len(ids))
            own = tape.gather_rows(z_src[t], np.arange(len(ids)))
            terms = [tape.mul(tape.elu(own), tape.const((count == 0).astype(float)[:, None]))]
            if names:
                inv = tape.const((1.0 / np.maximum(count, 1.0))[:, None])
                terms.append(tape.mul(tape.add_n([new_state[n] for n in names]), inv))
            new_self[t] = tape.add_n(terms)
        selfrep, rel_state, valid = new_self, new_state, new_valid

    tt = batch.target_type
    n = len(batch.targets)
    names = [r.name for r in graph.in_relations(tt)]
    Us = [P(f"sc.U.{nm}") for nm in names]
    if names:
        fallback = tape.matmul(selfrep[tt], tape.scale(tape.add_n(Us), 1.0 / len(Us)))
        hs = [rel_state.get(nm, tape.const(np.zeros((n, cfg.d)))) for nm in names]
        mask = np.stack([valid.get(nm, np.zeros(n, dtype=bool)) for nm in names], axis=1)
        z, beta = fuse_relations(tape, hs, [z_rel[nm] for nm in names], Us,
                                 [P(f"sc.V.{nm}") for nm in names], mask, fallback)
        if trace is not None:
            trace["beta"] = (beta.value, names, mask)
        return z
    return selfrep[tt]
