"""Label smoothing over the overall positive sample graph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .numcore import ContractError


@dataclass
class PropagationOperator:
    S: sp.csr_matrix
    gamma: float = 0.5
    steps: int = 50

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")


def normalized_adjacency(positive_graph, n: int | None = None) -> sp.csr_matrix:
    """``D^-1/2 A D^-1/2`` where ``A`` is the symmetrised graph plus self-loops."""
    samples, targets, _ = positive_graph.edges()
    n = positive_graph.num_targets if n is None else n
    a = sp.coo_matrix((np.ones(len(samples)), (targets, samples)), shape=(n, n)).tocsr()
    a = ((a + a.T) > 0).astype(np.float64)
    a = a.tolil()
    a.setdiag(1.0)
    a = a.tocsr()
    inv = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    d = sp.diags(inv)
    return (d @ a @ d).tocsr()


def base_prediction(probs: np.ndarray, labels: np.ndarray, train_rows) -> np.ndarray:
    """Classifier rows everywhere except one-hot true labels on training rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError("prediction matrix must be 2-D")
    if len(labels) != probs.shape[0]:
        raise ContractError(f"{probs.shape[0]} prediction rows for {len(labels)} nodes")
    G = probs.copy()
    train_rows = np.asarray(train_rows, dtype=np.int64)
    G[train_rows] = np.eye(probs.shape[1])[labels[train_rows]]
    return G


def smooth(G: np.ndarray, op: PropagationOperator) -> np.ndarray:
    """``G(t+1) = gamma * S @ G(t) + (1 - gamma) * G`` for ``op.steps`` steps."""
    if op.S.shape[0] != G.shape[0]:
        raise ContractError(f"operator has {op.S.shape[0]} rows, prediction matrix {G.shape[0]}")
    out = G
    base = (1.0 - op.gamma) * G
    for _ in range(op.steps):
        out = op.gamma * (op.S @ out) + base
    return out


def renormalize_rows(Y: np.ndarray) -> np.ndarray:
    s = Y.sum(axis=1, keepdims=True)
    return np.where(s > 0, Y / np.where(s > 0, s, 1.0), 1.0 / Y.shape[1])


def predict(G: np.ndarray, op: PropagationOperator) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed, row-normalised predictions and their argmax classes."""
    Y = renormalize_rows(smooth(G, op))
    return Y, Y.argmax(axis=1)


def write_predictions(Y: np.ndarray, path, node_ids=None) -> None:
    """``node_id<TAB>predicted_class<TAB>prob_0 .. prob_{C-1}`` lines."""
    ids = np.arange(len(Y)) if node_ids is None else node_ids
    with open(path, "w", encoding="utf-8") as f:
        for i, row in zip(ids, Y):
            f.write("\t".join([str(int(i)), str(int(row.argmax()))] + [repr(float(x)) for x in row]) + "\n")
