import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhco.hetgraph import (
    DuplicateEdgeError,
    DuplicateSplitError,
    EndpointRangeError,
    HeteroGraph,
    MissingFileError,
    RaggedFeatureError,
    Relation,
    SchemaError,
    UnknownRelationError,
    bipartite_view,
    load_dataset,
    toy_graph,
    write_dataset,
)
from rhco.synthetic import generate_synthetic


def random_graph(rng, n_types=3, n_rel=4, max_nodes=12, max_edges=30):
    types = {f"t{i}": int(rng.integers(1, max_nodes)) for i in range(n_types)}
    names = list(types)
    rels, edges = [], {}
    for k in range(n_rel):
        s, d = names[rng.integers(n_types)], names[rng.integers(n_types)]
        r = Relation(f"r{k}", s, d)
        pairs = {(int(rng.integers(types[s])), int(rng.integers(types[d])))
                 for _ in range(rng.integers(0, max_edges))}
        pairs = sorted(pairs)
        rels.append(r)
        edges[r.name] = ([p[0] for p in pairs], [p[1] for p in pairs])
    return HeteroGraph(types, rels, edges), edges


def write_toy(tmp_path, edges_writes="0\t0\n0\t1\n1\t1\n2\t2\n"):
    (tmp_path / "schema.tsv").write_text(
        "nodetype\tauthor\t3\nnodetype\tpaper\t3\nnodetype\tfield\t2\n"
        "relation\twrites\tauthor\tpaper\nrelation\thas_field\tpaper\tfield\ntarget\tpaper\n")
    (tmp_path / "edges-writes.tsv").write_text(edges_writes)
    (tmp_path / "edges-has_field.tsv").write_text("0\t0\n1\t1\n2\t0\n")
    for t, n in (("author", 3), ("paper", 3), ("field", 2)):
        (tmp_path / f"features-{t}.tsv").write_text("".join(f"{i}.0\t1.5\n" for i in range(n)))
    (tmp_path / "labels.tsv").write_text("0\t0\n1\t1\n2\t0\n")
    (tmp_path / "splits.tsv").write_text("0\ttrain\n1\tvalid\n2\ttest\n")
    return tmp_path


def test_toy_fixture_loads(tmp_path):
    ds = load_dataset(write_toy(tmp_path))
    g = ds.graph
    assert len(g.node_types) == 3 and len(g.relations) == 2
    assert g == toy_graph()
    assert ds.split.target_type == "paper" and ds.split.num_classes == 2


def test_writes_view_contains_only_author_paper_edges():
    v = bipartite_view(toy_graph(), "writes")
    assert v.relation == Relation("writes", "author", "paper")
    assert v.edge_set() == {(0, 0), (0, 1), (1, 1), (2, 2)}
    assert list(v.in_neighbors(1)) == [0, 1]
    assert list(v.out_neighbors(0)) == [0, 1]


def test_zero_edge_relation(tmp_path):
    ds = load_dataset(write_toy(tmp_path, edges_writes=""))
    assert ds.graph.num_edges("writes") == 0
    assert len(bipartite_view(ds.graph, "writes")) == 0


def test_unknown_relation():
    with pytest.raises(UnknownRelationError):
        bipartite_view(toy_graph(), "cites")


def test_heterogeneity_required():
    with pytest.raises(SchemaError):
        HeteroGraph({"a": 2}, [Relation("r", "a", "a")], {})


@pytest.mark.parametrize("mutate, exc", [
    (lambda p: (p / "labels.tsv").unlink(), MissingFileError),
    (lambda p: (p / "edges-writes.tsv").write_text("0\t7\n"), EndpointRangeError),
    (lambda p: (p / "edges-writes.tsv").write_text("0\t1\n0\t1\n"), DuplicateEdgeError),
    (lambda p: (p / "features-paper.tsv").write_text("1\t2\n3\n4\t5\n"), RaggedFeatureError),
    (lambda p: (p / "features-paper.tsv").write_text("1\t2\n"), RaggedFeatureError),
    (lambda p: (p / "splits.tsv").write_text("0\ttrain\n0\ttest\n"), DuplicateSplitError),
])
def test_load_errors(tmp_path, mutate, exc):
    write_toy(tmp_path)
    mutate(tmp_path)
    with pytest.raises(exc) as info:
        load_dataset(tmp_path)
    assert str(tmp_path) in str(info.value)


def test_error_carries_line(tmp_path):
    write_toy(tmp_path, edges_writes="0\t0\n1\t9\n")
    with pytest.raises(EndpointRangeError, match=r"edges-writes.tsv:2"):
        load_dataset(tmp_path)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_views_partition_edges_and_reverse_is_transpose(seed):
    g, edges = random_graph(np.random.default_rng(seed))
    full = {(r, s, d) for r, (ss, dd) in edges.items() for s, d in zip(ss, dd)}
    union = set()
    for r in g.relations:
        v = bipartite_view(g, r.name)
        union |= {(r.name, s, d) for s, d in v.edge_set()}
        fwd = {(u, int(w)) for u in range(g.num_nodes(r.src)) for w in v.out_neighbors(u)}
        assert fwd == v.edge_set()
        ip = v.by_target.indptr
        assert ip[0] == 0 and (np.diff(ip) >= 0).all() and ip[-1] == len(v)
    assert union == full


@pytest.mark.parametrize("seed", [0, 1])
def test_round_trip_synthetic(tmp_path, seed):
    ds = generate_synthetic(150, 30, 3, 0.7, 5, seed, cites_per_target=seed)
    write_dataset(ds, tmp_path)
    assert load_dataset(tmp_path) == ds


def test_edge_order_does_not_matter():
    a = HeteroGraph({"a": 3, "b": 3}, [Relation("r", "a", "b")], {"r": ([0, 2, 1], [1, 0, 2])})
    b = HeteroGraph({"a": 3, "b": 3}, [Relation("r", "a", "b")], {"r": ([1, 0, 2], [2, 1, 0])})
    assert a == b
