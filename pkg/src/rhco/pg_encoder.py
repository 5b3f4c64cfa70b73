"""Positive-graph view: mean of positive samples' features per metapath, then semantic fusion."""
from __future__ import annotations

import numpy as np

from .numcore import ContractError, Tape, Tensor, glorot


def init_pg_params(tags, in_dim: int, d: int, rng: np.random.Generator) -> dict:
    p = {f"pg.W.{t}": glorot(rng, in_dim, d) for t in tags}
    p["pg.Wsem"] = glorot(rng, d, d)
    p["pg.bsem"] = np.zeros((1, d))
    p["pg.q"] = glorot(rng, d, 1)
    return p


def metapath_aggregate(tape: Tape, x: np.ndarray, samples, rows, n_rows: int, W) -> Tensor:
    """Row ``v`` gets ``mean_u (x_u W)`` over the samples ``u`` attached to ``v``.

    ``samples`` are global ids into ``x``; ``rows`` the local target row of
    each edge.  Every row must own at least one sample.
    """
    rows = np.asarray(rows, dtype=np.int64)
    deg = np.bincount(rows, minlength=n_rows)
    if (deg == 0).any():
        raise ContractError(f"target row {int(np.argmin(deg))} has no positive samples")
    mean = np.zeros((n_rows, x.shape[1]))
    np.add.at(mean, rows, x[samples])
    mean /= deg[:, None]
    # averaging before the linear map is the same quantity and far cheaper
    return tape.matmul(tape.const(mean), W)


def semantic_fuse(tape: Tape, hs, Wsem, bsem, q, score_inputs=None):
    """Batch-global metapath weights ``beta`` and the fused embedding.

    The score of a metapath is the row mean of ``q . tanh(h W + b)`` over
    ``score_inputs[p]`` (default: ``hs[p]`` itself).  Returns ``(z, beta)``
    with ``beta`` of shape (1, P).
    """
    if len(hs) == 1:
        return hs[0], tape.const(np.ones((1, 1)))
    scores = []
    for part in (score_inputs or hs):
        s = tape.matmul(tape.tanh(tape.add(tape.matmul(part, Wsem), bsem)), q)
        scores.append(tape.scale(tape.sum_axis(s, 0), 1.0 / part.shape[0]))
    beta = tape.softmax_rows(tape.concat(scores, axis=1))
    P = len(hs)
    terms = [tape.mul(h, tape.matmul(beta, tape.const(np.eye(P)[:, [i]]))) for i, h in enumerate(hs)]
    return tape.add_n(terms), beta


def all_target_means(graphs, x: np.ndarray, tags) -> dict:
    """Per-metapath mean positive features for every target, for full-graph scoring."""
    out = {}
    for t in tags:
        csr = graphs[t].csr
        deg = csr.degrees()
        rows = np.repeat(np.arange(len(deg)), deg)
        m = np.zeros((len(deg), x.shape[1]))
        np.add.at(m, rows, x[csr.indices])
        out[t] = m / deg[:, None]
    return out


def encode_pg(tape: Tape, batch, x: np.ndarray, params: dict, tags, full_means=None,
              trace=None) -> Tensor:
    """Positive-graph view embeddings for the batch's extended targets.

    Metapath weights are averaged over the batch's extended targets, or over
    every target when ``full_means`` (from :func:`all_target_means`) is given.
    """
    if not tags:
        raise ContractError("no metapath positive graphs to encode")
    n = len(batch.targets)
    hs = []
    for t in tags:
        samples, rows = batch.positive_edges[t]
        hs.append(metapath_aggregate(tape, x, samples, rows, n, tape.param(params, f"pg.W.{t}")))
    P = lambda k: tape.param(params, k)
    score_inputs = None
    if full_means is not None:
        score_inputs = [tape.matmul(tape.const(full_means[t]), P(f"pg.W.{t}")) for t in tags]
    z, beta = semantic_fuse(tape, hs, P("pg.Wsem"), P("pg.bsem"), P("pg.q"), score_inputs)
    if trace is not None:
        trace["beta_pg"] = beta.value
    return z
