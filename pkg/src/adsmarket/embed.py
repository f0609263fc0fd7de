"""Node and term embeddings, inductive meta-path aggregation and kNN search."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.cluster.vq import kmeans2

from .hetnet import HetGraph, MetaPath, SchemaError, _as_path


class ColdFeatureError(KeyError):
    """A node has no attribute term with a known vector."""


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


# ---------------------------------------------------------------------------
# skip-gram with type-restricted negative sampling


@dataclass
class EmbeddingTable:
    """Input vectors (one row per token), context vectors and per-type sampling tables."""

    vectors: np.ndarray
    context: np.ndarray
    token_types: np.ndarray
    sampling: dict = field(default_factory=dict)  # type -> (token ids, probabilities)
    names: Optional[list] = None
    history: list = field(default_factory=list)   # objective per epoch

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def sample_negatives(self, types: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``m`` negatives per entry of ``types``, each from the matching type's table."""
        out = np.empty((len(types), m), dtype=np.int64)
        for t in np.unique(types):
            rows = np.flatnonzero(types == t)
            ids, cdf = self.sampling[int(t)]
            picks = np.searchsorted(cdf, rng.random((len(rows), m)), side="right")
            out[rows] = ids[np.minimum(picks, len(ids) - 1)]
        return out


def _sampling_tables(counts: np.ndarray, token_types: np.ndarray, power: float = 0.75) -> dict:
    tables = {}
    for t in np.unique(token_types):
        ids = np.flatnonzero((token_types == t) & (counts > 0))
        if len(ids) == 0:
            continue
        p = counts[ids].astype(float) ** power
        tables[int(t)] = (ids, np.cumsum(p / p.sum()))
    return tables


def context_pairs(corpus: Sequence[np.ndarray], window: int) -> np.ndarray:
    """All (center, context) pairs within ``window`` positions."""
    out = []
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        for off in range(1, window + 1):
            if len(seq) <= off:
                break
            out.append(np.stack([seq[:-off], seq[off:]], axis=1))
            out.append(np.stack([seq[off:], seq[:-off]], axis=1))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(out)


def skipgram_objective(table: EmbeddingTable, pairs: np.ndarray, negatives: np.ndarray) -> float:
    """Mean of log s(u_c . x_v) + sum log s(-u_n . x_v) over the given pairs."""
    v = table.vectors[pairs[:, 0]]
    pos = np.sum(v * table.context[pairs[:, 1]], axis=1)
    neg = np.einsum("bd,bmd->bm", v, table.context[negatives])
    return float(np.mean(_log_sigmoid(pos) + _log_sigmoid(-neg).sum(axis=1)))


def skipgram_gradients(v: np.ndarray, c: np.ndarray, negs: np.ndarray):
    """Ascent directions of one pair's objective w.r.t. x_v, u_c and the negatives."""
    gp = 1.0 - _sigmoid(np.sum(v * c, axis=-1))
    gn = -_sigmoid(np.einsum("...d,...md->...m", v, negs))
    dv = gp[..., None] * c + np.einsum("...m,...md->...d", gn, negs)
    dc = gp[..., None] * v
    dn = gn[..., None] * v[..., None, :]
    return dv, dc, dn


def train_skipgram(corpus: Sequence[np.ndarray], n_tokens: int, token_types: np.ndarray, d: int,
                   window: int, negatives: int, epochs: int, rng: np.random.Generator,
                   learning_rate: float = 0.025, batch_size: int = 512,
                   names: Optional[list] = None) -> EmbeddingTable:
    """Minibatch SGD on the negative-sampling objective.

    The negatives for a context token of type t are drawn only among tokens
    of type t, with unigram frequency to the power 3/4.
    """
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    if negatives < 1:
        raise ValueError("need at least one negative sample")
    pairs = context_pairs(corpus, window)
    if len(pairs) == 0:
        raise ValueError("empty corpus")
    token_types = np.asarray(token_types, dtype=np.int64)
    counts = np.bincount(np.concatenate([np.asarray(s) for s in corpus]), minlength=n_tokens)
    table = EmbeddingTable(
        vectors=(rng.random((n_tokens, d)) - 0.5) / d,
        context=np.zeros((n_tokens, d)),
        token_types=token_types,
        sampling=_sampling_tables(counts, token_types),
        names=names,
    )
    probe = pairs[rng.choice(len(pairs), size=min(len(pairs), 4096), replace=False)]
    probe_negs = table.sample_negatives(token_types[probe[:, 1]], negatives, rng)
    table.history.append(skipgram_objective(table, probe, probe_negs))
    total_steps = max(1, epochs * ((len(pairs) + batch_size - 1) // batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            batch = pairs[order[start: start + batch_size]]
            lr = learning_rate * max(1e-4, 1.0 - step / total_steps)
            step += 1
            negs = table.sample_negatives(token_types[batch[:, 1]], negatives, rng)
            dv, dc, dn = skipgram_gradients(table.vectors[batch[:, 0]], table.context[batch[:, 1]],
                                            table.context[negs])
            np.add.at(table.vectors, batch[:, 0], lr * dv)
            np.add.at(table.context, batch[:, 1], lr * dc)
            np.add.at(table.context, negs.ravel(), lr * dn.reshape(-1, d))
        table.history.append(skipgram_objective(table, probe, probe_negs))
    return table


def train_graph_embeddings(g: HetGraph, walk_paths: Sequence[str], cfg, rng: np.random.Generator) -> EmbeddingTable:
    from .hetnet import metapath_walks

    corpus = []
    for p in walk_paths:
        corpus += [w for w in metapath_walks(g, p, cfg.walks_per_node, cfg.walk_length, rng) if len(w) > 1]
    names = [g.node_of(i) for i in range(g.n_nodes)]
    return train_skipgram(corpus, g.n_nodes, g.type_of_global(), cfg.dim, cfg.window, cfg.negatives,
                          cfg.epochs, rng, cfg.learning_rate, cfg.batch_size, names)


# ---------------------------------------------------------------------------
# term features


def node_features_from_terms(terms: Sequence[str], term_table: Mapping[str, np.ndarray]) -> np.ndarray:
    """Mean of the known term vectors of a node."""
    known = [term_table[t] for t in terms if t in term_table]
    if not known:
        raise ColdFeatureError("node has no term with a known vector")
    return np.mean(np.asarray(known, dtype=float), axis=0)


def term_matrix(node_terms: Sequence[Sequence[str]], vocab: Mapping[str, int]) -> sp.csr_matrix:
    """Row-normalized node x term incidence; rows without known terms stay zero."""
    rows, cols = [], []
    for i, terms in enumerate(node_terms):
        known = sorted({vocab[t] for t in terms if t in vocab})
        rows += [i] * len(known)
        cols += known
    m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(node_terms), len(vocab)))
    deg = np.asarray(m.sum(axis=1)).ravel()
    return sp.diags(1.0 / np.where(deg > 0, deg, 1.0)) @ m


# ---------------------------------------------------------------------------
# meta-path guided aggregation


def _row_normalize(m: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.asarray(m.sum(axis=1)).ravel()
    return (sp.diags(1.0 / np.where(deg > 0, deg, 1.0)) @ m).tocsr()


@dataclass
class AggregatorModel:
    """Per-path stacks of shared layers plus a linear scorer.

    For a path with L hops, position k (0 <= k < L) computes
    h_k = tanh(x_k U_k + mean_{neighbours}(h_{k+1}) V_k + b_k) for every node
    of its type at once, with h_L the raw term features. Every node at one
    position uses the same (U_k, V_k, b_k). An anchor's representation is the
    mean of h_0 over its paths; the scorer reads [z_q, z_a, z_q * z_a].
    """

    query_paths: list
    ad_paths: list
    params: dict
    hidden: int
    vocab: dict
    node_terms: dict  # node type -> list of term lists, aligned with graph ids

    def path_params(self, side: str, i: int, k: int):
        p = self.params
        return p[f"{side}{i}.U{k}"], p[f"{side}{i}.V{k}"], p[f"{side}{i}.b{k}"]


def init_aggregator(g: HetGraph, term_vectors: np.ndarray, vocab: dict, node_terms: dict,
                    meta_paths: Sequence[str], hidden: int, rng: np.random.Generator,
                    scale: float = 0.3) -> AggregatorModel:
    query_paths = [_as_path(p) for p in meta_paths]
    for p in query_paths:
        if p.types[0] != "query" or p.types[-1] != "ad":
            raise SchemaError(f"aggregation path {p} must lead from query to ad")
    ad_paths = [MetaPath(p.types[::-1], p.relations[::-1]) for p in query_paths]
    d = term_vectors.shape[1]
    params = {"E": term_vectors.astype(float).copy()}
    for side, paths in (("q", query_paths), ("a", ad_paths)):
        for i, p in enumerate(paths):
            n_layers = len(p.relations)
            for k in range(n_layers):
                below = d if k == n_layers - 1 else hidden
                params[f"{side}{i}.U{k}"] = rng.normal(0.0, scale / np.sqrt(d), (d, hidden))
                params[f"{side}{i}.V{k}"] = rng.normal(0.0, scale / np.sqrt(below), (below, hidden))
                params[f"{side}{i}.b{k}"] = np.zeros(hidden)
    params["w"] = rng.normal(0.0, scale / np.sqrt(hidden), 3 * hidden)
    params["c"] = np.zeros(1)
    return AggregatorModel(query_paths, ad_paths, params, hidden, vocab, node_terms)


class _Structure:
    """Graph-derived matrices needed by the forward pass (fixed during training)."""

    def __init__(self, g: HetGraph, model: AggregatorModel):
        self.feat = {t: term_matrix(model.node_terms.get(t, [[]] * len(g.nodes[t])), model.vocab)
                     for t in g.nodes}
        self.adj = {}
        for p in model.query_paths + model.ad_paths:
            for a, r, b in p.hops():
                if (a, r, b) not in self.adj:
                    self.adj[(a, r, b)] = _row_normalize(g.adjacency(a, r, b))


def _forward_path(model: AggregatorModel, st: _Structure, side: str, i: int, p: MetaPath, E: np.ndarray):
    L = len(p.relations)
    x = [st.feat[t] @ E for t in p.types]
    h_below = x[L]
    cache = []
    for k in reversed(range(L)):
        U, V, b = model.path_params(side, i, k)
        A = st.adj[(p.types[k], p.relations[k], p.types[k + 1])]
        m = A @ h_below
        h = np.tanh(x[k] @ U + m @ V + b)
        cache.append((k, A, x[k], m, h))
        h_below = h
    return h_below, cache


def aggregate(model: AggregatorModel, g: HetGraph, st: Optional[_Structure] = None):
    """Representations of every query and every ad node, with backprop caches."""
    st = st or _Structure(g, model)
    E = model.params["E"]
    out = {}
    for side, paths in (("q", model.query_paths), ("a", model.ad_paths)):
        reps, caches = [], []
        for i, p in enumerate(paths):
            h, cache = _forward_path(model, st, side, i, p, E)
            reps.append(h)
            caches.append(cache)
        out[side] = (np.mean(reps, axis=0), caches)
    return out, st


def aggregator_loss(model: AggregatorModel, g: HetGraph, qi: np.ndarray, ai: np.ndarray, y: np.ndarray,
                    st: Optional[_Structure] = None, with_grad: bool = True):
    """Mean log-loss of p = sigmoid(F(z_q, z_a)) over pairs, and its gradients."""
    fw, st = aggregate(model, g, st)
    zq_all, zq_cache = fw["q"]
    za_all, za_cache = fw["a"]
    zq, za = zq_all[qi], za_all[ai]
    w, c = model.params["w"], model.params["c"]
    H = model.hidden
    feats = np.concatenate([zq, za, zq * za], axis=1)
    logit = feats @ w + c[0]
    loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    if not with_grad:
        return loss, None
    n = len(y)
    dlogit = (_sigmoid(logit) - y) / n
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["w"] = feats.T @ dlogit
    grads["c"] = np.array([dlogit.sum()])
    dfeat = np.outer(dlogit, w)
    dzq = dfeat[:, :H] + dfeat[:, 2 * H:] * za
    dza = dfeat[:, H:2 * H] + dfeat[:, 2 * H:] * zq
    dZq = np.zeros_like(zq_all)
    np.add.at(dZq, qi, dzq)
    dZa = np.zeros_like(za_all)
    np.add.at(dZa, ai, dza)
    for side, paths, dz, caches in (("q", model.query_paths, dZq, zq_cache), ("a", model.ad_paths, dZa, za_cache)):
        for i, p in enumerate(paths):
            _backward_path(model, st, side, i, p, caches[i], dz / len(paths), grads)
    return loss, grads


def _backward_path(model, st, side, i, p, cache, dh, grads):
    L = len(p.relations)
    dE = grads["E"]
    for k, A, xk, m, h in reversed(cache):
        # cache is stored top-down from k = L-1 to 0; reversed walks k = 0 .. L-1
        U, V, b = model.path_params(side, i, k)
        dz = dh * (1.0 - h * h)
        grads[f"{side}{i}.U{k}"] += xk.T @ dz
        grads[f"{side}{i}.V{k}"] += m.T @ dz
        grads[f"{side}{i}.b{k}"] += dz.sum(axis=0)
        dx = dz @ U.T
        dE += st.feat[p.types[k]].T @ dx
        dh = A.T @ (dz @ V.T)
        if k == L - 1:
            dE += st.feat[p.types[L]].T @ dh


def train_aggregator(g: HetGraph, term_vectors: np.ndarray, vocab: dict, node_terms: dict,
                     positives: Sequence[tuple[str, str]], negatives: Sequence[tuple[str, str]],
                     meta_paths: Sequence[str], epochs: int, rng: np.random.Generator,
                     hidden: int = 16, learning_rate: float = 0.05, batch_size: int = 256,
                     finetune_terms: bool = True) -> AggregatorModel:
    """Fit the aggregator on labelled (query, ad) pairs with Adam."""
    model = init_aggregator(g, term_vectors, vocab, node_terms, meta_paths, hidden, rng)
    qi = np.array([g.index["query"][q] for q, _ in positives] + [g.index["query"][q] for q, _ in negatives])
    ai = np.array([g.index["ad"][a] for _, a in positives] + [g.index["ad"][a] for _, a in negatives])
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    if len(y) == 0:
        raise ValueError("no training pairs")
    st = _Structure(g, model)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    t = 0
    model.history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            b = order[start: start + batch_size]
            loss, grads = aggregator_loss(model, g, qi[b], ai[b], y[b], st)
            total += loss * len(b)
            t += 1
            for k, gk in grads.items():
                if k == "E" and not finetune_terms:
                    continue
                m1[k] = 0.9 * m1[k] + 0.1 * gk
                m2[k] = 0.999 * m2[k] + 0.001 * gk * gk
                mh = m1[k] / (1 - 0.9 ** t)
                vh = m2[k] / (1 - 0.999 ** t)
                model.params[k] -= learning_rate * mh / (np.sqrt(vh) + 1e-8)
        model.history.append(total / len(y))
    return model


def aggregator_score(model: AggregatorModel, g: HetGraph, q: str, a: str,
                     q_terms: Optional[Sequence[str]] = None, a_terms: Optional[Sequence[str]] = None) -> float:
    zq = embed_node(model, g, "query", q, q_terms)
    za = embed_node(model, g, "ad", a, a_terms)
    feats = np.concatenate([zq, za, zq * za])
    return float(_sigmoid(feats @ model.params["w"] + model.params["c"][0]))


def embed_node(model, g: Optional[HetGraph], node_type: str, node_id: Optional[str] = None,
               terms: Optional[Sequence[str]] = None) -> np.ndarray:
    """Vector for a node.

    With an ``EmbeddingTable`` this returns the trained row. With an
    ``AggregatorModel`` known nodes aggregate their meta-path neighbourhoods;
    a node outside the graph is embedded from its own terms with empty
    neighbourhoods.
    """
    if isinstance(model, EmbeddingTable):
        return model.vectors[g.global_id(node_type, node_id)].copy()
    side = {"query": "q", "ad": "a"}[node_type]
    paths = model.query_paths if side == "q" else model.ad_paths
    E = model.params["E"]
    if g is not None and node_id is not None and node_id in g.index[node_type]:
        fw, _ = aggregate(model, g)
        return fw[side][0][g.index[node_type][node_id]].copy()
    if terms is None:
        raise ColdFeatureError("cold node needs terms")
    known = [model.vocab[t] for t in terms if t in model.vocab]
    if not known:
        raise ColdFeatureError("cold node has no known terms")
    x = E[known].mean(axis=0)
    reps = []
    for i, p in enumerate(paths):
        U, V, b = model.path_params(side, i, 0)
        reps.append(np.tanh(x @ U + b))
    return np.mean(reps, axis=0)


# ---------------------------------------------------------------------------
# nearest neighbours


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


@dataclass
class KnnResult:
    items: list
    clamped: bool = False


class KnnIndex:
    """Cosine kNN over fixed vectors, exact or with an inverted-file partition."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, n_lists: int = 0, n_probes: int = 0, seed: int = 0):
        self.ids = list(ids)
        self.vectors = _normalize(np.asarray(vectors, dtype=float))
        n = len(self.ids)
        # rank of each id in sorted order, for deterministic tie-breaks
        self.id_rank = np.empty(n, dtype=np.int64)
        self.id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(n)
        self.n_lists = n_lists or max(1, int(round(np.sqrt(n))))
        self.n_probes = n_probes or max(1, -(-3 * self.n_lists // 4))
        self.centroids = None
        self.lists: list[np.ndarray] = []
        if n > 0 and self.n_lists > 1:
            rng = np.random.default_rng(seed)
            init = self.vectors[rng.choice(n, size=self.n_lists, replace=False)]
            with warnings.catch_warnings():
                # an emptied cluster keeps its previous centroid, which is fine here
                warnings.simplefilter("ignore", UserWarning)
                cent, _ = kmeans2(self.vectors, init, iter=10, minit="matrix", seed=seed)
            self.centroids = _normalize(cent)
            assign = np.argmax(self.vectors @ self.centroids.T, axis=1)
            self.lists = [np.flatnonzero(assign == c) for c in range(self.n_lists)]

    def _rank(self, cand: np.ndarray, q: np.ndarray, k: int) -> list[tuple[str, float]]:
        scores = self.vectors[cand] @ q
        # scores equal to 12 decimals count as ties, which go to the smaller id
        order = np.lexsort((self.id_rank[cand], -np.round(scores, 12)))[:k]
        return [(self.ids[cand[i]], float(scores[i])) for i in order]

    def search(self, query: np.ndarray, k: int, mode: str = "exact") -> KnnResult:
        n = len(self.ids)
        clamped = k > n
        k = min(k, n)
        q = _normalize(np.asarray(query, dtype=float))
        if mode == "exact" or self.centroids is None:
            return KnnResult(self._rank(np.arange(n), q, k), clamped)
        if mode != "ivf":
            raise ValueError(f"unknown mode {mode!r}")
        near = np.argsort(-(self.centroids @ q), kind="stable")[: self.n_probes]
        cand = np.concatenate([self.lists[c] for c in near])
        return KnnResult(self._rank(cand, q, k), clamped)


def knn(index: KnnIndex, query_vector: np.ndarray, k: int, mode: str = "exact") -> KnnResult:
    return index.search(query_vector, k, mode)


def recall_at_k(index: KnnIndex, queries: np.ndarray, k: int) -> float:
    hits = 0
    for q in queries:
        exact = {i for i, _ in index.search(q, k, "exact").items}
        approx = {i for i, _ in index.search(q, k, "ivf").items}
        hits += len(exact & approx)
    return hits / (len(queries) * k)


# ---------------------------------------------------------------------------
# persistence


def save_embeddings(path, rows: Sequence[tuple[str, str, np.ndarray]]) -> None:
    """Rows ``node_type node_id d v1 .. vd``; term rows use node_type ``term``."""
    with open(path, "w") as fh:
        for t, n, v in rows:
            fh.write(" ".join([t, n, str(len(v))] + [repr(float(x)) for x in v]) + "\n")


def load_embeddings(path) -> list[tuple[str, str, np.ndarray]]:
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split(" ")
        d = int(parts[2])
        out.append((parts[0], parts[1], np.array([float(x) for x in parts[3: 3 + d]])))
    return out
