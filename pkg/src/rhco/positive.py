"""Positive sample selection from two-hop products of pre-trained attention.

For a target ``v`` and an intermediate type ``phi``, every two-hop path
``u -> u' -> v`` through a ``phi``-typed node contributes
``e(u, u') * e(u', v)`` to the weight of candidate ``u``.  The top ``T_pos``
candidates per target (weight descending, then id ascending) form the positive
sample graph of that metapath; summing weights over metapaths gives the
overall graph.  Targets are processed in chunks so that no full metapath
neighbour graph is ever held in memory.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hetgraph import CSR, HeteroGraph
from .sampling import expand_rows

OVERALL = "overall"


class AttentionTableError(ValueError):
    pass


class OracleCapacityError(RuntimeError):
    pass


class AttentionWeightTable:
    """Per-relation edge weights aligned with ``graph.edges(rel)`` (target-major)."""

    def __init__(self, graph: HeteroGraph, weights: dict, check: bool = True, tol: float = 1e-6):
        self.graph = graph
        self.weights = {}
        for r in graph.relations:
            w = np.asarray(weights.get(r.name, np.zeros(graph.num_edges(r.name))), dtype=np.float64)
            if w.shape != (graph.num_edges(r.name),):
                raise AttentionTableError(
                    f"relation {r.name!r}: {w.shape[0]} weights for {graph.num_edges(r.name)} edges")
            self.weights[r.name] = w
        if check:
            self.validate(tol)

    def __getitem__(self, name):
        return self.weights[name]

    def weight(self, name, src, dst) -> float:
        i = self.graph.edge_index(name, [src], [dst])[0]
        if i < 0:
            raise KeyError(f"no edge {src} -> {dst} in relation {name!r}")
        return float(self.weights[name][i])

    def validate(self, tol=1e-6):
        for name, w in self.weights.items():
            if not np.all(np.isfinite(w)):
                raise AttentionTableError(f"relation {name!r}: non-finite weight")
            if (w < 0).any():
                raise AttentionTableError(f"relation {name!r}: negative weight {w.min()}")
            if (w > 1).any():
                raise AttentionTableError(f"relation {name!r}: weight {w.max()} exceeds 1")
            deg = self.graph.in_csr(name).degrees()
            sums = self._sums(name)
            bad = (deg > 0) & (np.abs(sums - 1.0) > tol)
            if bad.any():
                v = int(np.argmax(bad))
                raise AttentionTableError(
                    f"relation {name!r}: weights into target {v} sum to {sums[v]!r}, not 1")

    def _sums(self, name):
        csr = self.graph.in_csr(name)
        pos = np.repeat(np.arange(len(csr.indptr) - 1), csr.degrees())
        return np.bincount(pos, weights=self.weights[name], minlength=len(csr.indptr) - 1)

    def renormalized(self):
        out = {}
        for name, w in self.weights.items():
            csr = self.graph.in_csr(name)
            deg = csr.degrees()
            pos = np.repeat(np.arange(len(deg)), deg)
            sums = self._sums(name)[pos]
            uniform = 1.0 / np.maximum(deg[pos], 1)
            out[name] = np.where(sums > 0, w / np.where(sums > 0, sums, 1.0), uniform)
        return AttentionWeightTable(self.graph, out)

    def __eq__(self, other):
        return (self.weights.keys() == other.weights.keys()
                and all(np.array_equal(self.weights[k], other.weights[k]) for k in self.weights))


def uniform_attention(graph: HeteroGraph) -> AttentionWeightTable:
    """Every in-edge of a target weighted 1/in-degree."""
    out = {}
    for r in graph.relations:
        deg = graph.in_csr(r.name).degrees()
        out[r.name] = np.repeat(1.0 / np.maximum(deg, 1), deg)
    return AttentionWeightTable(graph, out)


def random_attention(graph: HeteroGraph, rng_seed=0) -> AttentionWeightTable:
    """Softmax of Gaussian logits over each target's in-edges, per relation."""
    rng = np.random.default_rng(rng_seed)
    out = {}
    for r in graph.relations:
        deg = graph.in_csr(r.name).degrees()
        w = np.exp(rng.normal(size=int(deg.sum())))
        pos = np.repeat(np.arange(len(deg)), deg)
        out[r.name] = w / np.bincount(pos, weights=w, minlength=len(deg))[pos]
    return AttentionWeightTable(graph, out)


def save_attention(table: AttentionWeightTable, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in table.graph.relations:
            src, dst = table.graph.edges(r.name)
            for s, d, w in zip(src.tolist(), dst.tolist(), table.weights[r.name].tolist()):
                f.write(f"{r.name}\t{s}\t{d}\t{w!r}\n")


def load_attention(path, graph: HeteroGraph, renormalize: bool = False) -> AttentionWeightTable:
    """Read ``relation<TAB>src<TAB>dst<TAB>weight`` lines; edges not listed get weight 0."""
    path = Path(path)
    if not path.exists():
        raise AttentionTableError(f"{path}: missing file")
    weights = {r.name: np.zeros(graph.num_edges(r.name)) for r in graph.relations}
    seen = {r.name: np.zeros(graph.num_edges(r.name), dtype=bool) for r in graph.relations}
    rows = {}
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            toks = raw.rstrip("\n").split("\t")
            if len(toks) != 4:
                raise AttentionTableError(f"{path}:{ln}: expected 4 tab-separated fields")
            name = toks[0]
            if name not in weights:
                raise AttentionTableError(f"{path}:{ln}: unknown relation {name!r}")
            try:
                s, d, w = int(toks[1]), int(toks[2]), float(toks[3])
            except ValueError:
                raise AttentionTableError(f"{path}:{ln}: malformed number") from None
            if not np.isfinite(w) or w < 0 or w > 1:
                raise AttentionTableError(f"{path}:{ln}: weight {w!r} outside [0, 1]")
            rows.setdefault(name, []).append((s, d, w, ln))
    for name, items in rows.items():
        arr = np.array([(s, d) for s, d, _, _ in items], dtype=np.int64)
        idx = graph.edge_index(name, arr[:, 0], arr[:, 1])
        for (s, d, w, ln), i in zip(items, idx):
            if i < 0:
                raise AttentionTableError(f"{path}:{ln}: edge {s} -> {d} not in relation {name!r}")
            if seen[name][i]:
                raise AttentionTableError(f"{path}:{ln}: duplicate weight for edge {s} -> {d}")
            seen[name][i] = True
            weights[name][i] = w
    table = AttentionWeightTable(graph, weights, check=False)
    if renormalize:
        return table.renormalized()
    try:
        table.validate()
    except AttentionTableError as e:
        raise AttentionTableError(f"{path}: {e}") from None
    return table


# -- metapaths ----------------------------------------------------------------

@dataclass(frozen=True)
class Metapath:
    tag: str
    intermediate: str
    into_target: str     # relation intermediate -> target, supplies e(u', v)
    from_target: str     # relation target -> intermediate, supplies e(u, u')


def metapaths(graph: HeteroGraph, target_type: str) -> list[Metapath]:
    """One symmetric length-2 metapath per intermediate type reachable both ways."""
    out, done = [], set()
    for r_in in graph.in_relations(target_type):
        phi = r_in.src
        if phi in done:
            continue
        outs = [r for r in graph.relations if r.src == target_type and r.dst == phi]
        if not outs:
            continue
        r_out = next((r for r in outs if r.name != r_in.name), outs[0])
        done.add(phi)
        out.append(Metapath(f"{target_type}-{phi}-{target_type}", phi, r_in.name, r_out.name))
    return out


def _find_metapath(graph, target_type, phi):
    for mp in metapaths(graph, target_type):
        if mp.intermediate == phi or mp.tag == phi:
            return mp
    return None


def metapath_weights(graph: HeteroGraph, table: AttentionWeightTable, v: int, metapath,
                     target_type: str | None = None) -> dict:
    """Map ``u -> a_{u,v}`` for one target and one metapath (or intermediate type name)."""
    if not isinstance(metapath, Metapath):
        mp = _find_metapath(graph, target_type, metapath)
        if mp is None:
            return {}
        metapath = mp
    in_csr = graph.in_csr(metapath.into_target)
    out_csr = graph.in_csr(metapath.from_target)
    w_in, w_out = table[metapath.into_target], table[metapath.from_target]
    acc = {}
    for j in range(in_csr.indptr[v], in_csr.indptr[v + 1]):
        mid = in_csr.indices[j]
        for k in range(out_csr.indptr[mid], out_csr.indptr[mid + 1]):
            u = int(out_csr.indices[k])
            acc[u] = acc.get(u, 0.0) + float(w_out[k]) * float(w_in[j])
    return acc


def overall_weights(per_metapath_maps) -> dict:
    acc = {}
    for m in per_metapath_maps:
        for u, a in m.items():
            acc[u] = acc.get(u, 0.0) + a
    return acc


# -- positive sample graphs ---------------------------------------------------

@dataclass
class PositiveGraph:
    """Directed ``sample -> target`` edges; each target's samples are in rank order."""
    tag: str
    csr: CSR
    weights: np.ndarray

    @property
    def num_targets(self):
        return len(self.csr.indptr) - 1

    def positives(self, v):
        return self.csr.row(v)

    def edges(self):
        deg = self.csr.degrees()
        return self.csr.indices, np.repeat(np.arange(len(deg)), deg), self.weights

    def __eq__(self, other):
        return (self.tag == other.tag
                and np.array_equal(self.csr.indptr, other.csr.indptr)
                and np.array_equal(self.csr.indices, other.csr.indices)
                and np.array_equal(self.weights, other.weights))


class PositiveGraphs(dict):
    """Ordered ``tag -> PositiveGraph`` with the overall graph stored last."""

    @property
    def overall(self) -> PositiveGraph:
        return self[OVERALL]

    @property
    def metapath_tags(self):
        return [t for t in self if t != OVERALL]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for tag, g in self.items():
            h.update(tag.encode())
            for a in (g.csr.indptr, g.csr.indices, g.weights):
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _select(n_targets, rows, cand, weight, t_pos, tag):
    """Top-``t_pos`` per row by (weight desc, id asc), self excluded unless alone."""
    targets = np.arange(n_targets)
    self_hit = cand == rows
    others = np.bincount(rows[~self_hit], minlength=n_targets)
    keep = ~self_hit | (others[rows] == 0)
    rows, cand, weight = rows[keep], cand[keep], weight[keep]
    order = np.lexsort((cand, -weight, rows))
    rows, cand, weight = rows[order], cand[order], weight[order]
    count = np.bincount(rows, minlength=n_targets)
    start = np.cumsum(count) - count
    rank = np.arange(len(rows)) - start[rows]
    keep = rank < t_pos
    rows, cand, weight = rows[keep], cand[keep], weight[keep]
    empty = np.bincount(rows, minlength=n_targets) == 0
    if empty.any():
        rows = np.concatenate([rows, targets[empty]])
        cand = np.concatenate([cand, targets[empty]])
        weight = np.concatenate([weight, np.zeros(int(empty.sum()))])
        order = np.argsort(rows, kind="stable")
        rows, cand, weight = rows[order], cand[order], weight[order]
    indptr = np.zeros(n_targets + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_targets), out=indptr[1:])
    return PositiveGraph(tag, CSR(indptr, cand.astype(np.int64)), weight)


def _chunk_weights(graph, table, mp, chunk):
    """Aggregated (row-in-chunk, candidate, weight) for one metapath, sorted by key."""
    in_csr = graph.in_csr(mp.into_target)
    out_csr = graph.in_csr(mp.from_target)
    pos1, mid, e1, _ = expand_rows(in_csr, chunk)
    pos2, cand, e2, _ = expand_rows(out_csr, mid)
    rows = pos1[pos2]
    w = table[mp.from_target][e2] * table[mp.into_target][e1][pos2]
    n = graph.num_nodes(graph.relation(mp.into_target).dst)
    key = rows * n + cand
    uniq, inv = np.unique(key, return_inverse=True)
    return uniq, np.bincount(inv.ravel(), weights=w, minlength=len(uniq))


def build_positive_graphs(graph: HeteroGraph, table: AttentionWeightTable, t_pos: int,
                          target_type: str, chunk_size: int = 4096) -> PositiveGraphs:
    """Per-metapath and overall top-``t_pos`` positive sample graphs."""
    if t_pos < 1:
        raise ValueError("t_pos must be >= 1")
    mps = metapaths(graph, target_type)
    n = graph.num_nodes(target_type)
    parts = {mp.tag: ([], [], []) for mp in mps}
    parts[OVERALL] = ([], [], [])
    for lo in range(0, n, chunk_size):
        chunk = np.arange(lo, min(n, lo + chunk_size))
        keys, vals = [], []
        for mp in mps:
            k, a = _chunk_weights(graph, table, mp, chunk)
            r = parts[mp.tag]
            r[0].append(k // n + lo)
            r[1].append(k % n)
            r[2].append(a)
            keys.append(k)
            vals.append(a)
        if keys:
            k = np.concatenate(keys)
            uniq, inv = np.unique(k, return_inverse=True)
            a = np.bincount(inv.ravel(), weights=np.concatenate(vals), minlength=len(uniq))
            r = parts[OVERALL]
            r[0].append(uniq // n + lo)
            r[1].append(uniq % n)
            r[2].append(a)
    out = PositiveGraphs()
    for tag, (rows, cand, w) in parts.items():
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
        out[tag] = _select(n, cat(rows, np.int64), cat(cand, np.int64), cat(w, np.float64), t_pos, tag)
    return out


def oracle_positive_graphs(graph: HeteroGraph, table: AttentionWeightTable, t_pos: int,
                           target_type: str, max_instances: int = 10_000) -> PositiveGraphs:
    """Reference selection by explicit enumeration of every metapath instance."""
    mps = metapaths(graph, target_type)
    n = graph.num_nodes(target_type)
    instances = {}
    total = 0
    for mp in mps:
        src_in, dst_in = graph.edges(mp.into_target)
        src_out, dst_out = graph.edges(mp.from_target)
        w_in, w_out = table[mp.into_target], table[mp.from_target]
        into_mid = {}
        for u, mid, w in zip(src_out.tolist(), dst_out.tolist(), w_out.tolist()):
            into_mid.setdefault(mid, []).append((u, w))
        inst = []
        for mid, v, w1 in zip(src_in.tolist(), dst_in.tolist(), w_in.tolist()):
            for u, w2 in into_mid.get(mid, []):
                inst.append((v, mid, u, w2, w1))
                total += 1
                if total > max_instances:
                    raise OracleCapacityError(f"more than {max_instances} metapath instances")
        inst.sort(key=lambda x: (x[0], x[1], x[2]))
        instances[mp.tag] = inst

    per = {}
    for tag, inst in instances.items():
        a = [dict() for _ in range(n)]
        for v, _, u, w2, w1 in inst:
            a[v][u] = a[v].get(u, 0.0) + w2 * w1
        per[tag] = a
    overall = [dict() for _ in range(n)]
    for tag in per:
        for v in range(n):
            for u, x in per[tag][v].items():
                overall[v][u] = overall[v].get(u, 0.0) + x

    def select(tag, weights):
        indptr, cand, w = [0], [], []
        for v in range(n):
            items = sorted(weights[v].items(), key=lambda kv: (-kv[1], kv[0]))
            others = [kv for kv in items if kv[0] != v]
            chosen = (others or items)[:t_pos] or [(v, 0.0)]
            cand += [u for u, _ in chosen]
            w += [x for _, x in chosen]
            indptr.append(len(cand))
        return PositiveGraph(tag, CSR(np.array(indptr, dtype=np.int64), np.array(cand, dtype=np.int64)),
                             np.array(w, dtype=np.float64))

    out = PositiveGraphs()
    for tag in per:
        out[tag] = select(tag, per[tag])
    out[OVERALL] = select(OVERALL, overall)
    return out


def save_positive_graphs(graphs: PositiveGraphs, path) -> None:
    """``metapath_tag<TAB>sample_id<TAB>target_id<TAB>weight`` lines, rank order per target."""
    with open(path, "w", encoding="utf-8") as f:
        for tag, g in graphs.items():
            s, t, w = g.edges()
            for a, b, c in zip(s.tolist(), t.tolist(), w.tolist()):
                f.write(f"{tag}\t{a}\t{b}\t{c!r}\n")


def load_positive_graphs(path, n_targets: int) -> PositiveGraphs:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: missing file")
    rows = {}
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            toks = raw.rstrip("\n").split("\t")
            if len(toks) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields")
            s, t = int(toks[1]), int(toks[2])
            if not (0 <= s < n_targets and 0 <= t < n_targets):
                raise ValueError(f"{path}:{ln}: node id out of range")
            rows.setdefault(toks[0], []).append((t, s, float(toks[3])))
    if OVERALL not in rows:
        raise ValueError(f"{path}: no '{OVERALL}' graph")
    out = PositiveGraphs()
    for tag in [t for t in rows if t != OVERALL] + [OVERALL]:
        items = rows[tag]
        t = np.array([x[0] for x in items], dtype=np.int64)
        order = np.argsort(t, kind="stable")
        indptr = np.zeros(n_targets + 1, dtype=np.int64)
        np.cumsum(np.bincount(t, minlength=n_targets), out=indptr[1:])
        out[tag] = PositiveGraph(tag, CSR(indptr, np.array([items[i][1] for i in order], dtype=np.int64)),
                                 np.array([items[i][2] for i in order]))
    return out
