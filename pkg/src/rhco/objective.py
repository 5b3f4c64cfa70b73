"""Projection head, cross-view contrastive loss, classifier and the combined loss."""
from __future__ import annotations

import numpy as np

from .numcore import ContractError, Tape, Tensor, glorot


def init_head_params(d: int, n_classes: int, rng: np.random.Generator) -> dict:
    return {
        "head.W1": glorot(rng, d, d), "head.b1": np.zeros((1, d)),
        "head.W2": glorot(rng, d, d), "head.b2": np.zeros((1, d)),
        "clf.W": glorot(rng, d, n_classes), "clf.b": np.zeros((1, n_classes)),
    }


def project(tape: Tape, z, params: dict) -> Tensor:
    """Shared two-layer head: affine, ELU, affine."""
    P = lambda k: tape.param(params, k)
    h = tape.elu(tape.add(tape.matmul(z, P("head.W1")), P("head.b1")))
    return tape.add(tape.matmul(h, P("head.W2")), P("head.b2"))


def _one_side(tape, anchor, other, seed_rows, pos_mask, tau):
    """Per-seed ``-log(sum_pos exp(s/tau) / sum_all exp(s/tau))``, shape (n_seeds, 1)."""
    sim = tape.scale(tape.cosine(tape.gather_rows(anchor, seed_rows), other), 1.0 / tau)
    everything = np.ones(pos_mask.shape, dtype=bool)
    return tape.sub(tape.masked_logsumexp(sim, everything), tape.masked_logsumexp(sim, pos_mask))


def contrastive_loss(tape: Tape, p_sc, p_pg, seed_rows, pos_mask: np.ndarray, tau: float,
                     lam: float) -> Tensor:
    """Cross-view contrastive loss averaged over seeds.

    ``p_sc``/``p_pg`` are projected embeddings of all extended targets;
    ``pos_mask[i, j]`` marks target row ``j`` as a positive of seed ``i``
    (whose own row is ``seed_rows[i]``).  Every other extended target acts as
    a negative.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"view balance must lie in [0, 1], got {lam}")
    pos_mask = np.asarray(pos_mask, dtype=bool)
    if pos_mask.shape != (len(seed_rows), p_pg.shape[0]):
        raise ContractError(f"positive mask {pos_mask.shape} vs {len(seed_rows)} seeds "
                            f"and {p_pg.shape[0]} targets")
    l_sc = tape.mean(_one_side(tape, p_sc, p_pg, seed_rows, pos_mask, tau))
    l_pg = tape.mean(_one_side(tape, p_pg, p_sc, seed_rows, pos_mask, tau))
    return tape.add(tape.scale(l_sc, lam), tape.scale(l_pg, 1.0 - lam))


def classify(tape: Tape, z, params: dict) -> Tensor:
    """Softmax class probabilities, one row per input row."""
    return tape.softmax_rows(tape.add(tape.matmul(z, tape.param(params, "clf.W")),
                                      tape.param(params, "clf.b")))


def classification_loss(tape: Tape, probs, labels, rows=None, normalize: bool = False,
                        tol: float = 1e-6) -> Tensor:
    """Summed cross-entropy over ``rows`` (all rows when None); mean when ``normalize``."""
    rows = np.arange(probs.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(rows):
        raise ContractError(f"{len(labels)} labels for {len(rows)} rows")
    off = np.abs(probs.value.sum(axis=1) - 1.0)
    if (off > tol).any() or (probs.value < -tol).any():
        raise ContractError(f"prediction row {int(np.argmax(off))} is not a probability vector")
    if len(rows) == 0:
        return tape.const(np.zeros((1, 1)))
    onehot = np.eye(probs.shape[1])[labels]
    picked = tape.sum_axis(tape.mul(tape.gather_rows(probs, rows), tape.const(onehot)), 1)
    total = tape.scale(tape.sum(tape.log(picked, floor=1e-12)), -1.0)
    return tape.scale(total, 1.0 / len(rows)) if normalize else total


def total_loss(tape: Tape, l_c, l_v, alpha: float):
    """``alpha * l_c + (1 - alpha) * l_v``; plain floats are accepted as well."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"loss weight must lie in [0, 1], got {alpha}")
    if not isinstance(l_c, Tensor) and not isinstance(l_v, Tensor):
        return alpha * float(l_c) + (1.0 - alpha) * float(l_v)
    return tape.add(tape.scale(tape.const(l_c), alpha), tape.scale(tape.const(l_v), 1.0 - alpha))
