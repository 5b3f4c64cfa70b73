"""Typed graph storage and the on-disk dataset layout.

Node ids are dense 0-based integers per type; a node's global identity is the
pair ``(type, id)``. Each relation keeps two compressed-row adjacencies: by
target (in-neighbours, the order every per-edge array follows) and by source.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(Exception):
    """Base for dataset validation failures; carries file and line context."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingFileError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class EndpointRangeError(DatasetError):
    pass


class DuplicateEdgeError(DatasetError):
    pass


class RaggedFeatureError(DatasetError):
    pass


class LabelError(DatasetError):
    pass


class DuplicateSplitError(DatasetError):
    pass


class UnknownRelationError(KeyError):
    pass


@dataclass(frozen=True)
class Relation:
    name: str
    src: str
    dst: str


@dataclass(frozen=True)
class CSR:
    indptr: np.ndarray
    indices: np.ndarray

    def row(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self):
        return np.diff(self.indptr)


def _csr(rows, cols, n_rows):
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return CSR(indptr, cols.astype(np.int64)), order


class HeteroGraph:
    """Directed graph with typed nodes and typed edges."""

    def __init__(self, node_types, relations, edges):
        self.node_types = dict(node_types)
        self.relations = list(relations)
        self._rel = {r.name: r for r in self.relations}
        if len(self._rel) != len(self.relations):
            raise SchemaError("duplicate relation name")
        if len(self.node_types) + len(self.relations) <= 2:
            raise SchemaError("a heterogeneous graph needs |node types| + |relations| > 2")
        self._in, self._out = {}, {}
        for r in self.relations:
            for t in (r.src, r.dst):
                if t not in self.node_types:
                    raise SchemaError(f"relation {r.name!r} uses undeclared node type {t!r}")
            src, dst = edges.get(r.name, (np.zeros(0, np.int64), np.zeros(0, np.int64)))
            src = np.asarray(src, dtype=np.int64)
            dst = np.asarray(dst, dtype=np.int64)
            if src.shape != dst.shape:
                raise SchemaError(f"relation {r.name!r}: source and target arrays differ in length")
            for ids, t in ((src, r.src), (dst, r.dst)):
                bad = (ids < 0) | (ids >= self.node_types[t])
                if bad.any():
                    i = int(np.argmax(bad))
                    raise EndpointRangeError(
                        f"relation {r.name!r}: edge {i} endpoint {ids[i]} out of range for "
                        f"type {t!r} with {self.node_types[t]} nodes", line=i + 1)
            in_csr, order = _csr(dst, src, self.node_types[r.dst])
            srt_dst, srt_src = dst[order], src[order]
            dup = (np.diff(srt_dst) == 0) & (np.diff(srt_src) == 0)
            if dup.any():
                i = int(np.argmax(dup))
                raise DuplicateEdgeError(
                    f"relation {r.name!r}: duplicate edge {srt_src[i]} -> {srt_dst[i]}")
            self._in[r.name] = in_csr
            self._out[r.name], _ = _csr(src, dst, self.node_types[r.src])

    # -- catalog ---------------------------------------------------------
    def relation(self, name) -> Relation:
        try:
            return self._rel[name]
        except KeyError:
            raise UnknownRelationError(f"unknown relation {name!r}") from None

    def num_nodes(self, ntype) -> int:
        return self.node_types[ntype]

    def num_edges(self, name=None) -> int:
        if name is None:
            return sum(len(c.indices) for c in self._in.values())
        return len(self.in_csr(name).indices)

    def in_relations(self, ntype) -> list[Relation]:
        return [r for r in self.relations if r.dst == ntype]

    def in_csr(self, name) -> CSR:
        self.relation(name)
        return self._in[name]

    def out_csr(self, name) -> CSR:
        self.relation(name)
        return self._out[name]

    def edges(self, name):
        """(src, dst) arrays in target-major order (dst, then src, ascending)."""
        c = self.in_csr(name)
        dst = np.repeat(np.arange(len(c.indptr) - 1), c.degrees())
        return c.indices.copy(), dst

    def edge_index(self, name, src, dst):
        """Positions of (src, dst) pairs in the target-major edge order; -1 if absent."""
        c = self.in_csr(name)
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        out = np.full(len(src), -1, dtype=np.int64)
        n_dst = len(c.indptr) - 1
        ok = (dst >= 0) & (dst < n_dst)
        for i in np.nonzero(ok)[0]:
            lo, hi = c.indptr[dst[i]], c.indptr[dst[i] + 1]
            j = lo + np.searchsorted(c.indices[lo:hi], src[i])
            if j < hi and c.indices[j] == src[i]:
                out[i] = j
        return out

    def __eq__(self, other):
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        if self.node_types != other.node_types or self.relations != other.relations:
            return False
        return all(
            np.array_equal(self._in[n].indptr, other._in[n].indptr)
            and np.array_equal(self._in[n].indices, other._in[n].indices)
            for n in self._rel
        )

    def __repr__(self):
        types = ", ".join(f"{k}={v}" for k, v in self.node_types.items())
        rels = ", ".join(f"{r.name}:{r.src}->{r.dst}({self.num_edges(r.name)})" for r in self.relations)
        return f"HeteroGraph({types}; {rels})"


class RelationalBipartiteView:
    """Adjacency of one relation only."""

    def __init__(self, graph: HeteroGraph, name: str):
        self.relation = graph.relation(name)
        self.by_target = graph.in_csr(name)
        self.by_source = graph.out_csr(name)

    def in_neighbors(self, v):
        return self.by_target.row(v)

    def out_neighbors(self, u):
        return self.by_source.row(u)

    def edge_set(self):
        c = self.by_target
        return {(int(u), v) for v in range(len(c.indptr) - 1) for u in c.row(v)}

    def __len__(self):
        return len(self.by_target.indices)


def bipartite_view(graph: HeteroGraph, name: str) -> RelationalBipartiteView:
    return RelationalBipartiteView(graph, name)


def with_reverse_relations(graph: HeteroGraph, prefix="rev_") -> HeteroGraph:
    """Copy of ``graph`` with a transposed relation added for every relation."""
    relations = list(graph.relations)
    edges = {r.name: graph.edges(r.name) for r in graph.relations}
    for r in graph.relations:
        rev = Relation(prefix + r.name, r.dst, r.src)
        src, dst = edges[r.name]
        relations.append(rev)
        edges[rev.name] = (dst, src)
    return HeteroGraph(graph.node_types, relations, edges)


@dataclass
class LabeledSplit:
    target_type: str
    labels: np.ndarray          # class per target node, -1 when unlabeled
    num_classes: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = [set(map(int, s)) for s in (self.train, self.valid, self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DuplicateSplitError("train/valid/test splits overlap")
        if len(self.labels) and self.labels.max(initial=-1) >= self.num_classes:
            raise LabelError(f"label >= number of classes {self.num_classes}")
        for s in (self.train, self.valid, self.test):
            if len(s) and (self.labels[s] < 0).any():
                raise LabelError("split member without a label")

    def __eq__(self, other):
        return (self.target_type == other.target_type and self.num_classes == other.num_classes
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("labels", "train", "valid", "test")))


@dataclass
class Dataset:
    graph: HeteroGraph
    features: dict            # node type -> (count, dim) float64 matrix
    split: LabeledSplit
    planted: dict | None = None   # generator ground truth for non-target types; not persisted

    @property
    def target_type(self):
        return self.split.target_type

    def __eq__(self, other):
        return (self.graph == other.graph and self.split == other.split
                and self.features.keys() == other.features.keys()
                and all(np.array_equal(self.features[k], other.features[k]) for k in self.features))


def check_features(graph, features):
    for t, n in graph.node_types.items():
        if t not in features:
            raise MissingFileError(f"no features for node type {t!r}")
        x = features[t]
        if x.ndim != 2 or x.shape[0] != n:
            raise RaggedFeatureError(f"features for {t!r} have shape {x.shape}, expected {n} rows")
        if not np.all(np.isfinite(x)):
            raise RaggedFeatureError(f"features for {t!r} contain non-finite values")


# -- on-disk layout -------------------------------------------------------------

def _lines(path):
    if not path.exists():
        raise MissingFileError("missing file", path)
    with open(path, encoding="utf-8") as f:
        for i, raw in enumerate(f, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                yield i, line.split("\t")


def _int(tok, path, line):
    try:
        return int(tok)
    except ValueError:
        raise DatasetError(f"expected an integer, got {tok!r}", path, line) from None


def load_dataset(directory) -> Dataset:
    """Read and validate a dataset directory (``schema.tsv``, ``edges-*.tsv``, ...)."""
    root = Path(directory)
    node_types, relations, target, n_classes = {}, [], None, None
    schema = root / "schema.tsv"
    for ln, toks in _lines(schema):
        kind = toks[0]
        if kind == "nodetype" and len(toks) == 3:
            node_types[toks[1]] = _int(toks[2], schema, ln)
        elif kind == "relation" and len(toks) == 4:
            relations.append(Relation(toks[1], toks[2], toks[3]))
        elif kind == "target" and len(toks) == 2:
            target = toks[1]
        elif kind == "classes" and len(toks) == 2:
            n_classes = _int(toks[1], schema, ln)
        else:
            raise SchemaError(f"unrecognised schema line {toks!r}", schema, ln)
    if not node_types:
        raise SchemaError("no node types declared", schema)
    target = target or next(iter(node_types))
    if target not in node_types:
        raise SchemaError(f"target type {target!r} is not declared", schema)

    edges = {}
    for r in relations:
        path = root / f"edges-{r.name}.tsv"
        src, dst = [], []
        for ln, toks in _lines(path):
            if len(toks) != 2:
                raise DatasetError("expected 'src<TAB>dst'", path, ln)
            s, d = _int(toks[0], path, ln), _int(toks[1], path, ln)
            for v, t in ((s, r.src), (d, r.dst)):
                if t in node_types and not 0 <= v < node_types[t]:
                    raise EndpointRangeError(
                        f"endpoint {v} out of range for type {t!r} ({node_types[t]} nodes)", path, ln)
            src.append(s)
            dst.append(d)
        edges[r.name] = (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64))
    try:
        graph = HeteroGraph(node_types, relations, edges)
    except DatasetError as e:
        if e.path is None:
            e.args = (f"{schema.parent}: {e.args[0]}",)
        raise

    features = {}
    for t, n in node_types.items():
        path = root / f"features-{t}.tsv"
        rows, width = [], None
        for ln, toks in _lines(path):
            try:
                row = [float(x) for x in toks]
            except ValueError:
                raise RaggedFeatureError("non-numeric feature value", path, ln) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise RaggedFeatureError(f"row has {len(row)} values, expected {width}", path, ln)
            rows.append(row)
        if len(rows) != n:
            raise RaggedFeatureError(f"{len(rows)} feature rows for {n} nodes", path)
        features[t] = np.array(rows, dtype=np.float64).reshape(n, width or 0)
    check_features(graph, features)

    n_target = node_types[target]
    labels = np.full(n_target, -1, dtype=np.int64)
    path = root / "labels.tsv"
    for ln, toks in _lines(path):
        v, c = _int(toks[0], path, ln), _int(toks[1], path, ln)
        if not 0 <= v < n_target:
            raise EndpointRangeError(f"labelled node {v} out of range", path, ln)
        if c < 0 or (n_classes is not None and c >= n_classes):
            raise LabelError(f"class index {c} out of range", path, ln)
        labels[v] = c
    if n_classes is None:
        n_classes = int(labels.max(initial=-1)) + 1

    members = {"train": [], "valid": [], "test": []}
    seen = {}
    path = root / "splits.tsv"
    for ln, toks in _lines(path):
        v = _int(toks[0], path, ln)
        if len(toks) != 2 or toks[1] not in members:
            raise DatasetError("expected 'node_id<TAB>train|valid|test'", path, ln)
        if not 0 <= v < n_target:
            raise EndpointRangeError(f"split node {v} out of range", path, ln)
        if v in seen:
            raise DuplicateSplitError(f"node {v} already listed on line {seen[v]}", path, ln)
        if labels[v] < 0:
            raise LabelError(f"split node {v} has no label", path, ln)
        seen[v] = ln
        members[toks[1]].append(v)
    split = LabeledSplit(target, labels, n_classes,
                         *(np.array(members[k], dtype=np.int64) for k in ("train", "valid", "test")))
    return Dataset(graph, features, split)


def write_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    g, split = dataset.graph, dataset.split
    with open(root / "schema.tsv", "w", encoding="utf-8") as f:
        for t, n in g.node_types.items():
            f.write(f"nodetype\t{t}\t{n}\n")
        for r in g.relations:
            f.write(f"relation\t{r.name}\t{r.src}\t{r.dst}\n")
        f.write(f"target\t{split.target_type}\n")
        f.write(f"classes\t{split.num_classes}\n")
    for r in g.relations:
        src, dst = g.edges(r.name)
        with open(root / f"edges-{r.name}.tsv", "w", encoding="utf-8") as f:
            f.writelines(f"{s}\t{d}\n" for s, d in zip(src.tolist(), dst.tolist()))
    for t, x in dataset.features.items():
        with open(root / f"features-{t}.tsv", "w", encoding="utf-8") as f:
            for row in x.tolist():
                f.write("\t".join(repr(v) for v in row) + "\n")
    with open(root / "labels.tsv", "w", encoding="utf-8") as f:
        for v in np.nonzero(split.labels >= 0)[0].tolist():
            f.write(f"{v}\t{split.labels[v]}\n")
    with open(root / "splits.tsv", "w", encoding="utf-8") as f:
        for name in ("train", "valid", "test"):
            f.writelines(f"{v}\t{name}\n" for v in getattr(split, name).tolist())
    return root


def toy_graph() -> HeteroGraph:
    """Eight-node bibliographic graph: 3 authors, 3 papers, 2 fields.

    a0 writes p0 and p1, a1 writes p1, a2 writes p2; p0 and p2 share field f0,
    p1 has field f1.  PAP pairs: (p0, p1).  PFP pairs: (p0, p2).
    """
    return HeteroGraph(
        {"author": 3, "paper": 3, "field": 2},
        [Relation("writes", "author", "paper"), Relation("has_field", "paper", "field")],
        {"writes": ([0, 0, 1, 2], [0, 1, 1, 2]), "has_field": ([0, 1, 2], [0, 1, 0])},
    )
