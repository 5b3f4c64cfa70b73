"""Desk-scale academic graphs with planted classes."""
from __future__ import annotations

import numpy as np

from .hetgraph import Dataset, HeteroGraph, LabeledSplit, Relation, write_dataset
from .numcore import ContractError


def _balanced(rng, n, c):
    return rng.permutation(np.arange(n) % c)


def _pick(rng, pool_same, pool_all, k, homophily):
    chosen = []
    tries = 0
    while len(chosen) < k and tries < 50 * k:
        tries += 1
        pool = pool_same if (len(pool_same) and rng.random() < homophily) else pool_all
        x = int(pool[rng.integers(len(pool))])
        if x not in chosen:
            chosen.append(x)
    return chosen


def _split(rng, n):
    perm = rng.permutation(n)
    a, b = int(0.6 * n), int(0.8 * n)
    return np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])


def generate_synthetic(n_targets=2000, n_aux_per_type=400, n_classes=3, homophily=0.9,
                       feature_dim=16, rng_seed=7, *, authors_per_target=3, fields_per_target=2,
                       cites_per_target=0, noise=2.5, out_dir=None) -> Dataset:
    """Paper/author/field graph whose papers share intermediates by class.

    Every node gets a class; each of a paper's intermediate slots is filled
    from its own class with probability ``homophily`` and uniformly otherwise.
    Features are a per-type class centroid plus Gaussian noise of scale
    ``noise``. Reverse relations are included so that every intermediate type
    is reachable in both directions. Splits are 60/20/20.
    """
    if min(n_targets, n_aux_per_type, n_classes, feature_dim) <= 0:
        raise ContractError("sizes must be positive")
    if not 0.0 <= homophily <= 1.0:
        raise ContractError("homophily must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    y = _balanced(rng, n_targets, n_classes)
    aux = {"author": _balanced(rng, n_aux_per_type, n_classes),
           "field": _balanced(rng, n_aux_per_type, n_classes)}

    edges = {}
    per = {"author": authors_per_target, "field": fields_per_target}
    for t, cls in aux.items():
        pool_all = np.arange(n_aux_per_type)
        by_class = [np.nonzero(cls == c)[0] for c in range(n_classes)]
        src, dst = [], []
        for v in range(n_targets):
            for u in _pick(rng, by_class[y[v]], pool_all, min(per[t], n_aux_per_type), homophily):
                src.append(u)
                dst.append(v)
        edges[t] = (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64))

    relations = [Relation("writes", "author", "paper"), Relation("written_by", "paper", "author"),
                 Relation("has_field", "paper", "field"), Relation("field_of", "field", "paper")]
    e = {"writes": edges["author"], "written_by": edges["author"][::-1],
         "field_of": edges["field"], "has_field": edges["field"][::-1]}
    if cites_per_target > 0:
        pool_all = np.arange(n_targets)
        by_class = [np.nonzero(y == c)[0] for c in range(n_classes)]
        src, dst = [], []
        for v in range(n_targets):
            same = by_class[y[v]][by_class[y[v]] != v]
            for u in _pick(rng, same, pool_all[pool_all != v], min(cites_per_target, n_targets - 1),
                           homophily):
                src.append(v)
                dst.append(u)
        relations += [Relation("cites", "paper", "paper"), Relation("cited_by", "paper", "paper")]
        e["cites"] = (np.array(src), np.array(dst))
        e["cited_by"] = (np.array(dst), np.array(src))
    graph = HeteroGraph({"paper": n_targets, "author": n_aux_per_type, "field": n_aux_per_type},
                        relations, e)

    features = {}
    for t, cls in (("paper", y), ("author", aux["author"]), ("field", aux["field"])):
        centroids = rng.normal(size=(n_classes, feature_dim))
        features[t] = centroids[cls] + noise * rng.normal(size=(len(cls), feature_dim))
    split = LabeledSplit("paper", y.astype(np.int64), n_classes, *_split(rng, n_targets))
    ds = Dataset(graph, features, split, planted=aux)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def regular_dataset(n_targets, degree=5, feature_dim=8, rng_seed=0, n_classes=3) -> Dataset:
    """Paper/author graph in which every node has (about) ``degree`` neighbours.

    Built with a configuration model; the few duplicate pairings are dropped.
    Doubling ``n_targets`` doubles the edge count and the two-hop volume.
    """
    rng = np.random.default_rng(rng_seed)
    n_aux = n_targets
    tgt = np.repeat(np.arange(n_targets), degree)
    mid = rng.permutation(np.repeat(np.arange(n_aux), degree))
    key = np.unique(tgt * n_aux + mid)
    tgt, mid = key // n_aux, key % n_aux
    relations = [Relation("writes", "author", "paper"), Relation("written_by", "paper", "author")]
    graph = HeteroGraph({"paper": n_targets, "author": n_aux}, relations,
                        {"writes": (mid, tgt), "written_by": (tgt, mid)})
    features = {"paper": rng.normal(size=(n_targets, feature_dim)),
                "author": rng.normal(size=(n_aux, feature_dim))}
    y = _balanced(rng, n_targets, n_classes)
    split = LabeledSplit("paper", y.astype(np.int64), n_classes, *_split(rng, n_targets))
    return Dataset(graph, features, split)
