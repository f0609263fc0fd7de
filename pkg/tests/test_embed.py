import numpy as np
import pytest

from adsmarket.embed import (ColdFeatureError, KnnIndex, aggregate, aggregator_loss, aggregator_score, embed_node,
                             init_aggregator, knn, load_embeddings, node_features_from_terms, recall_at_k,
                             save_embeddings, skipgram_gradients, train_aggregator, train_graph_embeddings,
                             train_skipgram)
from adsmarket.hetnet import HetGraph, metapath_walks
from adsmarket.config import EmbedConfig

from gradchecks import aggregator_gradcheck, aggregator_instance
from oracles import cosine_linear_scan

PATHS = ["query-clicks-ad-clicks-query-clicks-ad", "query-matches-keyword-belongs-ad",
         "query-cooccurs-query-clicks-ad"]


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _two_cliques(n=6):
    nodes = {"query": [f"q{i}" for i in range(2 * n)], "ad": [f"a{i}" for i in range(2 * n)]}
    edges = []
    for block in (0, 1):
        for i in range(block * n, (block + 1) * n):
            for j in range(block * n, (block + 1) * n):
                edges.append(("query", f"q{i}", "clicks", "ad", f"a{j}", 1.0))
    return HetGraph(nodes, edges)


def test_positive_pair_gradient_increases_score():
    rng = np.random.default_rng(0)
    v, c = rng.normal(size=4), rng.normal(size=4)
    negs = rng.normal(size=(3, 4))
    dv, dc, _ = skipgram_gradients(v, c, negs)
    before = v @ c
    assert (v + 1e-3 * dv) @ c > before
    assert v @ (c + 1e-3 * dc) > before


def test_sampled_gradient_direction_agrees_with_full_softmax():
    # With every other token as a negative, the sampled step correlates with the exact softmax gradient.
    rng = np.random.default_rng(1)
    n, d = 6, 4
    X, U = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    v, c = 0, 1
    logits = U @ X[v]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    exact = U[c] - p @ U
    negs = U[[i for i in range(n) if i != c]]
    dv, _, _ = skipgram_gradients(X[v], U[c], negs)
    assert _cos(dv, exact) > 0


def test_two_cliques_separate():
    gaps = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        g = _two_cliques()
        cfg = EmbedConfig(dim=16, window=3, negatives=3, walks_per_node=20, walk_length=12, epochs=3,
                          learning_rate=0.05, batch_size=128)
        table = train_graph_embeddings(g, ["query-clicks-ad-clicks-query"], cfg, rng)
        vecs = [embed_node(table, g, "query", f"q{i}") for i in range(12)]
        intra = np.mean([_cos(vecs[i], vecs[j]) for i in range(12) for j in range(12)
                         if i < j and (i < 6) == (j < 6)])
        inter = np.mean([_cos(vecs[i], vecs[j]) for i in range(6) for j in range(6, 12)])
        gaps.append(intra - inter)
    assert np.mean(gaps) >= 0.3


def test_negatives_respect_token_type():
    rng = np.random.default_rng(2)
    corpus = [rng.integers(0, 20, size=10) for _ in range(30)]
    types = np.array([i % 3 for i in range(20)])
    table = train_skipgram(corpus, 20, types, 4, 2, 2, 1, rng)
    draws = table.sample_negatives(np.full(10_000, 1), 1, rng).ravel()
    assert np.all(types[draws] == 1)
    for t, (ids, cdf) in table.sampling.items():
        assert abs(cdf[-1] - 1.0) < 1e-12 and np.all(types[ids] == t)


def test_objective_improves_on_average():
    g = _two_cliques()
    gains = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        corpus = metapath_walks(g, "query-clicks-ad-clicks-query", 10, 10, rng)
        table = train_skipgram(corpus, g.n_nodes, g.type_of_global(), 8, 3, 3, 3, rng, 0.05, 128)
        gains.append(table.history[-1] - table.history[0])
    assert np.mean(gains) > 0


def test_skipgram_rejects_bad_inputs():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        train_skipgram([np.array([0])], 1, np.zeros(1, dtype=int), 4, 2, 1, 1, rng)
    with pytest.raises(ValueError):
        train_skipgram([np.array([0, 1])], 2, np.zeros(2, dtype=int), 1, 2, 1, 1, rng)


def test_skipgram_deterministic():
    corpus = [np.array([0, 1, 2, 1, 0]), np.array([2, 3, 2])]
    a = train_skipgram(corpus, 4, np.zeros(4, dtype=int), 4, 2, 2, 2, np.random.default_rng(9))
    b = train_skipgram(corpus, 4, np.zeros(4, dtype=int), 4, 2, 2, 2, np.random.default_rng(9))
    assert np.array_equal(a.vectors, b.vectors)


def test_term_features_mean():
    u = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(node_features_from_terms(["u"], {"u": u}), u)
    assert np.allclose(node_features_from_terms(["u", "v"], {"u": u, "v": -u}), 0.0)
    rng = np.random.default_rng(4)
    table = {f"t{i}": rng.normal(size=6) for i in range(5)}
    want = sum(table.values()) / 5
    assert np.allclose(node_features_from_terms(list(table) + ["unknown"], table), want, atol=1e-12)
    with pytest.raises(ColdFeatureError):
        node_features_from_terms(["unknown"], table)


def test_zero_aggregator_scores_half():
    model, g, qi, ai, y = aggregator_instance(0)
    for name in model.params:
        if name != "E":
            model.params[name][...] = 0.0
    assert aggregator_score(model, g, "q0", "a1") == 0.5


def test_cold_ad_gets_finite_embedding_and_score():
    model, g, *_ = aggregator_instance(1)
    z = embed_node(model, g, "ad", "brand-new", terms=["w1", "w3"])
    assert z.shape == (model.hidden,) and np.all(np.isfinite(z))
    s = aggregator_score(model, g, "q0", "brand-new", a_terms=["w1", "w3"])
    assert 0 < s < 1
    with pytest.raises(ColdFeatureError):
        embed_node(model, g, "ad", "brand-new", terms=["nothing-known"])
    with pytest.raises(ColdFeatureError):
        embed_node(model, g, "ad", "brand-new")


def test_aggregator_rejects_wrong_anchor():
    model, g, *_ = aggregator_instance(2)
    with pytest.raises(ValueError):
        init_aggregator(g, model.params["E"], model.vocab, model.node_terms, ["ad-clicks-query"], 3,
                        np.random.default_rng(0))


def test_layer_weights_shared_across_nodes():
    # parameters are per hop, not per node: a graph with more nodes gets identical parameters
    model, g, *_ = aggregator_instance(3)
    nodes = {t: list(ids) + [f"extra-{t}-{i}" for i in range(5)] for t, ids in g.nodes.items()}
    terms = {t: list(model.node_terms[t]) + [["w1"]] * 5 for t in nodes}
    bigger = HetGraph(nodes, g.edges())
    other = init_aggregator(bigger, model.params["E"], model.vocab, terms, PATHS, model.hidden,
                            np.random.default_rng(0), scale=1.0)
    same = init_aggregator(g, model.params["E"], model.vocab, model.node_terms, PATHS, model.hidden,
                           np.random.default_rng(0), scale=1.0)
    assert sorted(other.params) == sorted(same.params)
    assert all(np.array_equal(other.params[k], same.params[k]) for k in same.params)
    fw, _ = aggregate(other, bigger)
    assert fw["q"][0].shape == (len(nodes["query"]), model.hidden)


@pytest.mark.parametrize("seed", range(10))
def test_aggregator_gradients(seed):
    assert aggregator_gradcheck(seed)


def _vertical_world(rng, per_side=10):
    """Two verticals; queries click ads of their own vertical and share its terms."""
    nodes = {"query": [f"q{i}" for i in range(2 * per_side)], "ad": [f"a{i}" for i in range(2 * per_side)],
             "keyword": [], "advertiser": []}
    vocab = {f"v{v}t{t}": v * 5 + t for v in range(2) for t in range(5)}
    terms = {"query": [], "ad": [], "keyword": [], "advertiser": []}
    for kind in ("query", "ad"):
        for i in range(2 * per_side):
            v = i // per_side
            terms[kind].append([f"v{v}t{int(t)}" for t in rng.integers(0, 5, size=2)])
    edges = []
    for i in range(2 * per_side):
        for j in rng.choice(per_side, size=3, replace=False):
            edges.append(("query", f"q{i}", "clicks", "ad", f"a{(i // per_side) * per_side + int(j)}", 1.0))
    return HetGraph(nodes, edges), vocab, terms


def test_aggregator_beats_constant_on_held_out_pairs():
    rng = np.random.default_rng(5)
    g, vocab, terms = _vertical_world(rng)
    pos = [(f"q{i}", f"a{j}") for i in range(20) for j in range(20) if (i < 10) == (j < 10)]
    neg = [(f"q{i}", f"a{j}") for i in range(20) for j in range(20) if (i < 10) != (j < 10)]
    rng.shuffle(pos)
    rng.shuffle(neg)
    term_vectors = rng.normal(0, 0.3, (len(vocab), 6))
    paths = ["query-clicks-ad-clicks-query-clicks-ad"]
    model = train_aggregator(g, term_vectors, vocab, terms, pos[:150], neg[:150], paths, 30, rng, hidden=6,
                             learning_rate=0.03, batch_size=50)
    test_q = np.array([g.index["query"][q] for q, _ in pos[150:] + neg[150:]])
    test_a = np.array([g.index["ad"][a] for _, a in pos[150:] + neg[150:]])
    y = np.concatenate([np.ones(len(pos) - 150), np.zeros(len(neg) - 150)])
    loss, _ = aggregator_loss(model, g, test_q, test_a, y, with_grad=False)
    base = -np.mean(y * np.log(y.mean()) + (1 - y) * np.log(1 - y.mean()))
    assert loss < base


# -- nearest neighbours ---------------------------------------------------------

def test_indexed_vector_is_its_own_nearest():
    rng = np.random.default_rng(6)
    vecs = rng.normal(size=(50, 8))
    ids = [f"n{i:02d}" for i in range(50)]
    idx = KnnIndex(ids, vecs)
    res = knn(idx, vecs[17], 3)
    assert res.items[0][0] == "n17" and res.items[0][1] == pytest.approx(1.0)


def test_k_equal_to_size_returns_all_sorted_and_clamps_beyond():
    rng = np.random.default_rng(7)
    vecs = rng.normal(size=(20, 4))
    idx = KnnIndex([f"n{i:02d}" for i in range(20)], vecs)
    res = idx.search(rng.normal(size=4), 20)
    scores = [s for _, s in res.items]
    assert len(res.items) == 20 and scores == sorted(scores, reverse=True) and not res.clamped
    over = idx.search(rng.normal(size=4), 25)
    assert len(over.items) == 20 and over.clamped


def test_exact_mode_matches_scan_with_ties():
    rng = np.random.default_rng(8)
    base = rng.integers(-2, 3, size=(40, 3)).astype(float)
    ids = [f"n{i:03d}" for i in rng.permutation(40)]
    idx = KnnIndex(ids, base)
    for _ in range(20):
        q = rng.integers(-2, 3, size=3).astype(float)
        if not q.any():
            continue
        got = idx.search(q, 10).items
        want = cosine_linear_scan(ids, base, q, 10)
        assert [i for i, _ in got] == [i for i, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


def test_approximate_recall():
    rng = np.random.default_rng(9)
    centers = rng.normal(size=(30, 16))
    vecs = centers[rng.integers(30, size=3000)] + 0.3 * rng.normal(size=(3000, 16))
    idx = KnnIndex([f"n{i}" for i in range(3000)], vecs, seed=1)
    assert recall_at_k(idx, vecs[rng.choice(3000, 50, replace=False)], 10) >= 0.95


def test_embedding_file_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    rows = [("ad", "a1", rng.normal(size=5)), ("term", "w", rng.normal(size=5))]
    save_embeddings(tmp_path / "e.txt", rows)
    back = load_embeddings(tmp_path / "e.txt")
    assert [(t, n) for t, n, _ in back] == [("ad", "a1"), ("term", "w")]
    assert all(np.array_equal(a[2], b[2]) for a, b in zip(rows, back))
