"""Layered per-relation neighbour sampling for mini-batch training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hetgraph import CSR, HeteroGraph
from .numcore import ContractError


def expand_rows(csr: CSR, rows: np.ndarray):
    """All (row position, neighbour, edge position) triples for ``rows``, in storage order."""
    rows = np.asarray(rows, dtype=np.int64)
    start = csr.indptr[rows]
    deg = csr.indptr[rows + 1] - start
    total = int(deg.sum())
    pos = np.repeat(np.arange(len(rows)), deg)
    first = np.repeat(np.cumsum(deg) - deg, deg)
    eidx = np.repeat(start, deg) + np.arange(total) - first
    return pos, csr.indices[eidx], eidx, deg


def sample_in_neighbors(csr: CSR, rows, fanout, rng):
    """Uniformly keep ``min(fanout, degree)`` distinct in-neighbours per row.

    Returns ``(row position, neighbour)`` arrays sorted by position then
    neighbour id. ``fanout=None`` keeps every neighbour.
    """
    pos, nbr, _, deg = expand_rows(csr, rows)
    if fanout is None or not (deg > fanout).any():
        return pos, nbr
    keys = rng.random(len(nbr))
    order = np.lexsort((keys, pos))
    group_start = np.repeat(np.cumsum(deg) - deg, deg)
    rank = np.empty(len(nbr), dtype=np.int64)
    rank[order] = np.arange(len(nbr)) - group_start
    keep = rank < fanout
    pos, nbr = pos[keep], nbr[keep]
    order = np.lexsort((nbr, pos))
    return pos[order], nbr[order]


@dataclass
class MiniBatch:
    """Seeds, their extended target set and the sampled layered blocks.

    ``nodes[l][type]`` lists the global ids available after layer ``l``
    (``nodes[0]`` is the input frontier, ``nodes[L]`` holds only the extended
    targets). Each ``nodes[l+1][type]`` is a prefix of ``nodes[l][type]``.
    ``blocks[l][relation]`` holds local ``(src, dst)`` edges for layer ``l+1``:
    ``src`` indexes ``nodes[l][rel.src]`` and ``dst`` indexes ``nodes[l+1][rel.dst]``.
    """
    target_type: str
    seeds: np.ndarray
    targets: np.ndarray
    seed_rows: np.ndarray
    nodes: list
    blocks: list
    positive_edges: dict = field(default_factory=dict)   # tag -> (sample ids, target rows)

    @property
    def num_layers(self):
        return len(self.blocks)

    def positive_mask(self, tag="overall"):
        """Boolean (n_seeds, n_targets) matrix: target row u is a positive of seed i."""
        samples, rows = self.positive_edges[tag]
        col = {int(v): i for i, v in enumerate(self.targets)}
        mask = np.zeros((len(self.seeds), len(self.targets)), dtype=bool)
        for i, r in enumerate(self.seed_rows.tolist()):
            for s in samples[rows == r].tolist():
                mask[i, col[s]] = True
        return mask


def _as_target_ids(seeds, target_type, n_target):
    out = []
    for s in seeds:
        if isinstance(s, tuple):
            t, s = s
            if t != target_type:
                raise ContractError(f"seed ({t!r}, {s}) is not of target type {target_type!r}")
        s = int(s)
        if not 0 <= s < n_target:
            raise ContractError(f"seed {s} out of range for type {target_type!r}")
        out.append(s)
    return np.array(out, dtype=np.int64)


def sample_neighbors(g: HeteroGraph, seeds, fanout, layers: int, rng_seed, target_type: str,
                     positives=None) -> MiniBatch:
    """Build a ``layers``-deep sampled computation graph for ``seeds``.

    When ``positives`` (positive sample graphs) is given, the extended target
    set also contains every seed's overall positives, and each positive graph's
    edges into the extended targets are attached to the batch.
    """
    if fanout is not None and fanout < 1:
        raise ContractError("fanout must be >= 1")
    if layers < 1:
        raise ContractError("layers must be >= 1")
    seeds = _as_target_ids(seeds, target_type, g.num_nodes(target_type))
    rng = np.random.default_rng(rng_seed)

    uniq, first = np.unique(seeds, return_index=True)
    base = uniq[np.argsort(first)]
    targets = base
    if positives is not None:
        _, extra, _, _ = expand_rows(positives.overall.csr, base)
        extra = np.setdiff1d(extra, base)
        targets = np.concatenate([base, extra])
    row_of = {int(v): i for i, v in enumerate(targets)}
    seed_rows = np.array([row_of[int(s)] for s in seeds], dtype=np.int64)

    nodes = [None] * (layers + 1)
    nodes[layers] = {target_type: targets}
    blocks = [None] * layers
    for l in range(layers, 0, -1):
        cur = {t: ids.copy() for t, ids in nodes[l].items()}
        local = {}
        for t, ids in cur.items():
            m = np.full(g.num_nodes(t), -1, dtype=np.int64)
            m[ids] = np.arange(len(ids))
            local[t] = m
        block = {}
        for r in g.relations:
            if r.dst not in nodes[l]:
                continue
            dst_ids = nodes[l][r.dst]
            pos, nbr = sample_in_neighbors(g.in_csr(r.name), dst_ids, fanout, rng)
            if r.src not in cur:
                cur[r.src] = np.zeros(0, dtype=np.int64)
                local[r.src] = np.full(g.num_nodes(r.src), -1, dtype=np.int64)
            new = np.unique(nbr[local[r.src][nbr] < 0])
            local[r.src][new] = len(cur[r.src]) + np.arange(len(new))
            cur[r.src] = np.concatenate([cur[r.src], new])
            block[r.name] = (local[r.src][nbr], pos)
        nodes[l - 1] = cur
        blocks[l - 1] = block

    batch = MiniBatch(target_type, seeds, targets, seed_rows, nodes, blocks)
    if positives is not None:
        for tag, pg in positives.items():
            rows, samples, _, _ = expand_rows(pg.csr, targets)
            batch.positive_edges[tag] = (samples, rows)
    return batch
