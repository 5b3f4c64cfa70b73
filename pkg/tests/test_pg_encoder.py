import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from types import SimpleNamespace

from rhco.numcore import ContractError, Tape, finite_diff_check
from rhco.pg_encoder import all_target_means, encode_pg, init_pg_params, metapath_aggregate, semantic_fuse
from rhco.positive import build_positive_graphs, uniform_attention
from rhco.sampling import sample_neighbors
from rhco.synthetic import generate_synthetic


def aggregate(x, samples, rows, n, W):
    t = Tape(record=False)
    return metapath_aggregate(t, x, np.asarray(samples), np.asarray(rows), n, t.const(W)).value


def fuse(hs, Wsem, bsem, q, score_inputs=None):
    t = Tape(record=False)
    c = lambda xs: None if xs is None else [t.const(x) for x in xs]
    z, b = semantic_fuse(t, c(hs), t.const(Wsem), t.const(bsem), t.const(q), c(score_inputs))
    return z.value, b.value


# -- per-metapath aggregation -------------------------------------------------------

def test_single_positive_is_its_projection():
    rng = np.random.default_rng(0)
    x, W = rng.normal(size=(5, 3)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(aggregate(x, [3], [0], 1, W), x[[3]] @ W, atol=1e-14)


def test_opposite_features_cancel():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(1, 3))
    x = np.vstack([f, -f])
    assert np.abs(aggregate(x, [0, 1], [0, 0], 1, rng.normal(size=(3, 4)))).max() < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_five_positives_against_loop(seed):
    rng = np.random.default_rng(seed)
    x, W = rng.normal(size=(20, 6)), rng.normal(size=(6, 4))
    samples = rng.choice(20, size=10, replace=False)
    rows = np.repeat([0, 1], 5)
    got = aggregate(x, samples, rows, 2, W)
    for v in range(2):
        want = sum(x[u] @ W for u in samples[rows == v]) / 5
        np.testing.assert_allclose(got[v], want, atol=1e-12)


def test_empty_row_is_rejected():
    with pytest.raises(ContractError):
        aggregate(np.ones((3, 2)), [0], [0], 2, np.eye(2))


# -- semantic fusion -----------------------------------------------------------------

def test_single_metapath_gets_all_weight():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(4, 3))
    z, b = fuse([h], rng.normal(size=(3, 3)), np.zeros((1, 3)), rng.normal(size=(3, 1)))
    assert np.array_equal(b, [[1.0]]) and np.array_equal(z, h)


def test_equal_scores_give_half():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(4, 3))
    z, b = fuse([h, h], rng.normal(size=(3, 3)), np.zeros((1, 3)), rng.normal(size=(3, 1)))
    np.testing.assert_allclose(b, 0.5, atol=1e-15)
    np.testing.assert_allclose(z, h, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_two_metapaths_against_loop(seed):
    rng = np.random.default_rng(seed)
    hs = [rng.normal(size=(6, 4)) for _ in range(2)]
    W, b, q = rng.normal(size=(4, 4)), rng.normal(size=(1, 4)), rng.normal(size=(4, 1))
    z, beta = fuse(hs, W, b, q)
    w = np.array([np.mean([q.ravel() @ np.tanh(h[v] @ W + b.ravel()) for v in range(6)]) for h in hs])
    want = np.exp(w - w.max()) / np.exp(w - w.max()).sum()
    np.testing.assert_allclose(beta.ravel(), want, atol=1e-12)
    np.testing.assert_allclose(z, want[0] * hs[0] + want[1] * hs[1], atol=1e-12)


def test_score_inputs_only_change_the_weights():
    rng = np.random.default_rng(4)
    hs = [rng.normal(size=(3, 4)) for _ in range(2)]
    full = [rng.normal(size=(9, 4)) for _ in range(2)]
    W, b, q = rng.normal(size=(4, 4)), np.zeros((1, 4)), rng.normal(size=(4, 1))
    z, beta = fuse(hs, W, b, q, full)
    _, beta_full = fuse(full, W, b, q)
    np.testing.assert_allclose(beta, beta_full, atol=1e-15)
    np.testing.assert_allclose(z, beta[0, 0] * hs[0] + beta[0, 1] * hs[1], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 8))
def test_semantic_weights_form_a_distribution(seed, P, n):
    rng = np.random.default_rng(seed)
    hs = [rng.normal(size=(n, 3)) * rng.uniform(0.1, 10) for _ in range(P)]
    _, beta = fuse(hs, rng.normal(size=(3, 3)), rng.normal(size=(1, 3)), rng.normal(size=(3, 1)) * 5)
    assert beta.shape == (1, P) and (beta >= 0).all() and abs(beta.sum() - 1) < 1e-9


# -- whole view ------------------------------------------------------------------------

def fixture(seed=3, n=30):
    ds = generate_synthetic(n, 8, 3, 0.8, 4, seed, cites_per_target=1)
    pos = build_positive_graphs(ds.graph, uniform_attention(ds.graph), 3, "paper")
    params = init_pg_params(pos.metapath_tags, 4, 6, np.random.default_rng(seed))
    return ds, pos, params


def view(ds, pos, params, seeds, full=False, trace=None):
    b = sample_neighbors(ds.graph, seeds, 3, 2, 0, "paper", positives=pos)
    x = ds.features["paper"]
    means = all_target_means(pos, x, pos.metapath_tags) if full else None
    return b, encode_pg(Tape(record=False), b, x, params, pos.metapath_tags, means, trace).value


def test_order_of_positive_edges_does_not_matter():
    ds, pos, params = fixture()
    b = sample_neighbors(ds.graph, [0, 4, 7], 3, 2, 0, "paper", positives=pos)
    x = ds.features["paper"]
    z1 = encode_pg(Tape(record=False), b, x, params, pos.metapath_tags).value
    rng = np.random.default_rng(0)
    shuffled = {}
    for t, (s, r) in b.positive_edges.items():
        p = rng.permutation(len(s))
        shuffled[t] = (s[p], r[p])
    b2 = SimpleNamespace(targets=b.targets, positive_edges=shuffled)
    z2 = encode_pg(Tape(record=False), b2, x, params, pos.metapath_tags).value
    np.testing.assert_allclose(z1, z2, atol=1e-13)


def test_full_scope_makes_rows_batch_independent():
    ds, pos, params = fixture()
    b1, z1 = view(ds, pos, params, [0, 1], full=True)
    b2, z2 = view(ds, pos, params, [0, 1, 5, 9, 12], full=True)
    np.testing.assert_allclose(z1[b1.seed_rows], z2[b2.seed_rows[:2]], atol=1e-13)


def test_only_positive_features_matter():
    ds, pos, params = fixture()
    b, z = view(ds, pos, params, [2], full=False)
    used = np.unique(np.concatenate([s for s, _ in b.positive_edges.values()]))
    x = ds.features["paper"].copy()
    x[np.setdiff1d(np.arange(len(x)), used)] += 50.0
    z2 = encode_pg(Tape(record=False), b, x, params, pos.metapath_tags).value
    assert np.array_equal(z, z2)


def test_trace_reports_beta():
    ds, pos, params = fixture()
    trace = {}
    view(ds, pos, params, [0, 3], trace=trace)
    beta = trace["beta_pg"]
    assert beta.shape == (1, len(pos.metapath_tags)) and abs(beta.sum() - 1) < 1e-9


def test_no_metapaths_is_an_error():
    ds, pos, params = fixture()
    b = sample_neighbors(ds.graph, [0], 3, 2, 0, "paper", positives=pos)
    with pytest.raises(ContractError):
        encode_pg(Tape(record=False), b, ds.features["paper"], params, [])


@pytest.mark.parametrize("full", [False, True])
def test_gradients_match_finite_differences(full):
    ds, pos, params = fixture(n=14)
    b = sample_neighbors(ds.graph, [0, 1, 2], 3, 2, 0, "paper", positives=pos)
    x = ds.features["paper"]
    means = all_target_means(pos, x, pos.metapath_tags) if full else None
    w = np.random.default_rng(1).normal(size=(len(b.targets), 6))

    def loss(tape):
        z = encode_pg(tape, b, x, params, pos.metapath_tags, means)
        return tape.sum(tape.tanh(tape.mul(z, tape.const(w))))

    assert finite_diff_check(loss, params) < 1e-4
