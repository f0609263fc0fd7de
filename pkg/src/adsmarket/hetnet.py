"""Typed click network: construction, meta-path counting, PathSim and walks."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

NODE_TYPES = ("query", "keyword", "ad", "advertiser")
# relation -> (source type, destination type)
RELATIONS = {
    "clicks": ("query", "ad"),
    "matches": ("query", "keyword"),
    "belongs": ("keyword", "ad"),
    "owned_by": ("ad", "advertiser"),
    "cooccurs": ("query", "query"),
    "ad_sibling": ("ad", "ad"),
    "kw_sibling": ("keyword", "keyword"),
}


class SchemaError(ValueError):
    """An edge or meta-path that does not fit the node/relation schema."""


@dataclass(frozen=True)
class MetaPath:
    """Alternating node types and relations, e.g. query-clicks-ad-clicks-query."""

    types: tuple[str, ...]
    relations: tuple[str, ...]

    def __post_init__(self):
        if len(self.types) < 2 or len(self.relations) != len(self.types) - 1:
            raise SchemaError("a meta-path needs at least two node types")
        for t in self.types:
            if t not in NODE_TYPES:
                raise SchemaError(f"unknown node type {t!r}")
        for a, r, b in zip(self.types, self.relations, self.types[1:]):
            if r not in RELATIONS:
                raise SchemaError(f"unknown relation {r!r}")
            if RELATIONS[r] not in ((a, b), (b, a)):
                raise SchemaError(f"relation {r} does not connect {a} and {b}")

    @classmethod
    def parse(cls, text: str) -> "MetaPath":
        parts = text.split("-")
        if len(parts) % 2 == 0:
            raise SchemaError(f"malformed meta-path {text!r}")
        return cls(tuple(parts[0::2]), tuple(parts[1::2]))

    def __str__(self) -> str:
        out = [self.types[0]]
        for r, t in zip(self.relations, self.types[1:]):
            out += [r, t]
        return "-".join(out)

    @property
    def symmetric(self) -> bool:
        return self.types == self.types[::-1] and self.relations == self.relations[::-1]

    @property
    def round_trip(self) -> bool:
        """Symmetric with an even number of hops, so every node has self path instances."""
        return self.symmetric and len(self.relations) % 2 == 0

    @property
    def closed(self) -> bool:
        return self.types[0] == self.types[-1]

    def hops(self) -> list[tuple[str, str, str]]:
        return list(zip(self.types, self.relations, self.types[1:]))


def _as_path(p) -> MetaPath:
    return p if isinstance(p, MetaPath) else MetaPath.parse(p)


class HetGraph:
    """Immutable typed graph with one weighted sparse matrix per relation.

    Same-type relations are undirected: their matrices are symmetric.
    """

    def __init__(self, nodes: dict[str, Sequence[str]], edges: Iterable[tuple[str, str, str, str, str, float]]):
        self.nodes: dict[str, list[str]] = {t: list(nodes.get(t, ())) for t in NODE_TYPES}
        self.index: dict[str, dict[str, int]] = {}
        for t, ids in self.nodes.items():
            idx = {n: i for i, n in enumerate(ids)}
            if len(idx) != len(ids):
                raise SchemaError(f"duplicate {t} ids")
            self.index[t] = idx
        acc: dict[str, dict[tuple[int, int], float]] = {r: defaultdict(float) for r in RELATIONS}
        for src_type, src_id, rel, dst_type, dst_id, w in edges:
            if rel not in RELATIONS:
                raise SchemaError(f"unknown relation {rel!r}")
            sig = RELATIONS[rel]
            if (src_type, dst_type) != sig:
                if (dst_type, src_type) == sig:
                    src_type, src_id, dst_type, dst_id = dst_type, dst_id, src_type, src_id
                else:
                    raise SchemaError(f"{rel} edge from {src_type} to {dst_type} violates {sig}")
            if not w > 0:
                raise SchemaError("edge weights must be positive")
            try:
                i = self.index[src_type][src_id]
                j = self.index[dst_type][dst_id]
            except KeyError as exc:
                raise SchemaError(f"dangling reference {exc.args[0]!r} in {rel} edge") from None
            if sig[0] == sig[1]:
                if i == j:
                    raise SchemaError(f"self loop in {rel}")
                i, j = min(i, j), max(i, j)
            acc[rel][(i, j)] += float(w)
        self.matrices: dict[str, sp.csr_matrix] = {}
        for rel, (a, b) in RELATIONS.items():
            shape = (len(self.nodes[a]), len(self.nodes[b]))
            items = sorted(acc[rel].items())
            rows = np.array([k[0] for k, _ in items], dtype=np.int64)
            cols = np.array([k[1] for k, _ in items], dtype=np.int64)
            vals = np.array([v for _, v in items], dtype=float)
            m = sp.csr_matrix((vals, (rows, cols)), shape=shape)
            if a == b:
                m = (m + m.T).tocsr()
            m.sort_indices()
            self.matrices[rel] = m
        self.offsets = {}
        total = 0
        for t in NODE_TYPES:
            self.offsets[t] = total
            total += len(self.nodes[t])
        self.n_nodes = total

    # -- basic access --------------------------------------------------
    def adjacency(self, a: str, rel: str, b: str) -> sp.csr_matrix:
        """Weighted adjacency from type ``a`` to type ``b`` along ``rel``."""
        sig = RELATIONS[rel]
        if (a, b) == sig:
            return self.matrices[rel]
        if (b, a) == sig:
            return self.matrices[rel].T.tocsr()
        raise SchemaError(f"relation {rel} does not connect {a} and {b}")

    def n_edges(self, rel: str) -> int:
        m = self.matrices[rel]
        return m.nnz // 2 if RELATIONS[rel][0] == RELATIONS[rel][1] else m.nnz

    def global_id(self, node_type: str, node_id: str) -> int:
        return self.offsets[node_type] + self.index[node_type][node_id]

    def node_of(self, gid: int) -> tuple[str, str]:
        for t in reversed(NODE_TYPES):
            if gid >= self.offsets[t] and len(self.nodes[t]) > 0:
                return t, self.nodes[t][gid - self.offsets[t]]
        raise KeyError(gid)

    def type_of_global(self) -> np.ndarray:
        out = np.empty(self.n_nodes, dtype=np.int64)
        for k, t in enumerate(NODE_TYPES):
            out[self.offsets[t]: self.offsets[t] + len(self.nodes[t])] = k
        return out

    def edges(self) -> list[tuple[str, str, str, str, str, float]]:
        out = []
        for rel, (a, b) in RELATIONS.items():
            m = self.matrices[rel].tocoo()
            for i, j, w in zip(m.row, m.col, m.data):
                if a == b and i > j:
                    continue
                out.append((a, self.nodes[a][i], rel, b, self.nodes[b][j], float(w)))
        out.sort(key=lambda e: (e[2], e[1], e[4]))
        return out

    # -- persistence -------------------------------------------------------
    def to_tsv(self) -> str:
        lines = ["# src_type\tsrc_id\tedge_type\tdst_type\tdst_id\tweight"]
        for t in NODE_TYPES:
            for n in self.nodes[t]:
                lines.append(f"# node\t{t}\t{n}")
        for e in self.edges():
            lines.append("\t".join([e[0], e[1], e[2], e[3], e[4], repr(e[5])]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "HetGraph":
        nodes: dict[str, list[str]] = {t: [] for t in NODE_TYPES}
        edges = []
        for line in text.splitlines():
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "# node":
                nodes[parts[1]].append(parts[2])
            elif not line.startswith("#"):
                edges.append((parts[0], parts[1], parts[2], parts[3], parts[4], float(parts[5])))
        return cls(nodes, edges)

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv())

    @classmethod
    def load(cls, path) -> "HetGraph":
        return cls.from_tsv(Path(path).read_text())


def build_graph(click_log: Iterable[tuple[str, str, float]],
                keyword_table: Iterable[tuple[str, str, Sequence[str]]],
                ad_table: Iterable[tuple[str, str]],
                query_ids: Sequence[str],
                match_log: Iterable[tuple[str, str, float]] = (),
                cooccur_log: Iterable[tuple[str, str, float]] = (),
                min_support: float = 1) -> HetGraph:
    """Assemble the click network.

    click_log: (query, ad, count); keyword_table: (keyword, advertiser, ads);
    ad_table: (ad, advertiser); match_log: (query, keyword, count);
    cooccur_log: (query, query, count). Click, match and co-occurrence counts
    below ``min_support`` are dropped. Ads of one advertiser are siblings, as
    are keywords of one advertiser.
    """
    ads = list(ad_table)
    kws = list(keyword_table)
    advertisers = sorted({a for _, a in ads} | {a for _, a, _ in kws})
    nodes = {
        "query": list(query_ids),
        "keyword": [k for k, _, _ in kws],
        "ad": [a for a, _ in ads],
        "advertiser": advertisers,
    }
    edges = []
    for kind, log in (("clicks", click_log), ("matches", match_log), ("cooccurs", cooccur_log)):
        src_t, dst_t = RELATIONS[kind]
        totals: dict[tuple[str, str], float] = defaultdict(float)
        for a, b, c in log:
            if kind == "cooccurs" and a > b:
                a, b = b, a
            totals[(a, b)] += c
        for (a, b), c in sorted(totals.items()):
            if c >= min_support and c > 0 and a != b:
                edges.append((src_t, a, kind, dst_t, b, c))
    by_adv_ads: dict[str, list[str]] = defaultdict(list)
    for ad, adv in ads:
        edges.append(("ad", ad, "owned_by", "advertiser", adv, 1.0))
        by_adv_ads[adv].append(ad)
    by_adv_kws: dict[str, list[str]] = defaultdict(list)
    for kw, adv, kw_ads in kws:
        by_adv_kws[adv].append(kw)
        for ad in kw_ads:
            edges.append(("keyword", kw, "belongs", "ad", ad, 1.0))
    for group, rel, t in ((by_adv_ads, "ad_sibling", "ad"), (by_adv_kws, "kw_sibling", "keyword")):
        for members in group.values():
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    edges.append((t, members[i], rel, t, members[j], 1.0))
    return HetGraph(nodes, edges)


# ---------------------------------------------------------------------------
# path counting and PathSim


def commuting_matrix(g: HetGraph, path, rows: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """Path-instance counts between the end types of ``path`` (weights multiply)."""
    p = _as_path(path)
    m = None
    for a, r, b in p.hops():
        adj = g.adjacency(a, r, b)
        if m is None:
            m = adj if rows is None else adj[rows]
        else:
            m = m @ adj
    return m.tocsr()


def _self_counts(g: HetGraph, p: MetaPath) -> np.ndarray:
    """Diagonal of the commuting matrix of a round-trip path, via its half path."""
    half = len(p.relations) // 2
    h = commuting_matrix(g, MetaPath(p.types[: half + 1], p.relations[:half]))
    return np.asarray(h.multiply(h).sum(axis=1)).ravel()


def _check_round_trip(p: MetaPath) -> None:
    # An odd symmetric path such as query-cooccurs-query has no self instances,
    # which leaves the similarity undefined.
    if not p.round_trip:
        raise SchemaError(f"PathSim needs a symmetric meta-path with an even number of hops, got {p}")


def pathsim_matrix(g: HetGraph, path, chunk: int = 1024) -> sp.csr_matrix:
    """All-pairs PathSim for a symmetric meta-path, computed in row chunks."""
    p = _as_path(path)
    _check_round_trip(p)
    diag = _self_counts(g, p)
    n = len(g.nodes[p.types[0]])
    blocks = []
    for start in range(0, max(n, 1), chunk):
        rows = np.arange(start, min(start + chunk, n))
        m = commuting_matrix(g, p, rows).tocoo()
        denom = diag[rows[m.row]] + diag[m.col]
        vals = 2.0 * m.data / denom
        blocks.append(sp.csr_matrix((vals, (m.row, m.col)), shape=(len(rows), n)))
    return sp.vstack(blocks).tocsr() if blocks else sp.csr_matrix((0, 0))


def pathsim(g: HetGraph, path, x: str, y: str) -> float:
    p = _as_path(path)
    _check_round_trip(p)
    t = p.types[0]
    i, j = g.index[t][x], g.index[t][y]
    m = commuting_matrix(g, p, np.array([i, j]))
    num = m[0, j]
    den = m[0, i] + m[1, j]
    return 0.0 if den == 0 else float(2.0 * num / den)


def pathsim_topk(g: HetGraph, path, node: str, k: int, include_self: bool = False) -> list[tuple[str, float]]:
    """Top-k PathSim neighbours of ``node``: descending score, ties by id, zeros dropped."""
    p = _as_path(path)
    _check_round_trip(p)
    t = p.types[0]
    if node not in g.index[t]:
        raise KeyError(f"unknown {t} {node!r}")
    i = g.index[t][node]
    row = commuting_matrix(g, p, np.array([i])).tocoo()
    if row.nnz == 0:
        return []
    diag = _self_counts(g, p)
    out = []
    for j, c in zip(row.col, row.data):
        if c <= 0 or (j == i and not include_self):
            continue
        out.append((g.nodes[t][j], float(2.0 * c / (diag[i] + diag[j]))))
    out.sort(key=lambda x: (-x[1], x[0]))
    return out[:k]


def query_ad_index(g: HetGraph, path="query-clicks-ad-clicks-query", k: int = 20,
                   neighbor_queries: int = 10) -> dict[str, list[tuple[str, float]]]:
    """Query -> ads index by PathSim propagation.

    An ad scores s(q, q') for the most similar query q' (q itself scores 1)
    among the ``neighbor_queries`` PathSim neighbours that clicked it.
    """
    p = _as_path(path)
    if p.types[0] != "query":
        raise SchemaError("the propagation path must start at queries")
    sims = pathsim_matrix(g, p)
    clicks = g.adjacency("query", "clicks", "ad")
    ads = g.nodes["ad"]
    index = {}
    for i, q in enumerate(g.nodes["query"]):
        row = sims.getrow(i).tocoo()
        nbrs = [(float(v), g.nodes["query"][j], j) for j, v in zip(row.col, row.data) if j != i and v > 0]
        nbrs.sort(key=lambda x: (-x[0], x[1]))
        cands = [(1.0, i)] + [(v, j) for v, _, j in nbrs[:neighbor_queries]]
        best: dict[int, float] = {}
        for score, j in cands:
            for a in clicks.indices[clicks.indptr[j]: clicks.indptr[j + 1]]:
                if score > best.get(a, 0.0):
                    best[a] = score
        if best:
            ranked = sorted(((ads[a], s) for a, s in best.items()), key=lambda x: (-x[1], x[0]))
            index[q] = ranked[:k]
    return index


def save_index(index: dict[str, list[tuple[str, float]]], path) -> None:
    with open(path, "w") as fh:
        for q in sorted(index):
            fh.write(q + "\t" + json.dumps([[a, s] for a, s in index[q]]) + "\n")


def load_index(path) -> dict[str, list[tuple[str, float]]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        q, blob = line.split("\t", 1)
        out[q] = [(a, float(s)) for a, s in json.loads(blob)]
    return out


# ---------------------------------------------------------------------------
# meta-path guided random walks


def metapath_walks(g: HetGraph, path, walks_per_node: int, walk_length: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """Weighted random walks whose node types follow a closed meta-path cyclically.

    Each walk starts from every node of the path's first type and holds
    global node ids; it stops early where no neighbour of the required type
    exists. All walks advance in lock-step so the draws vectorize.
    """
    p = _as_path(path)
    if not p.closed:
        raise SchemaError("walk meta-paths must start and end at the same node type")
    hops = []
    for a, r, b in p.hops():
        adj = g.adjacency(a, r, b)
        cum = np.cumsum(adj.data)
        start = np.concatenate([[0.0], cum])[adj.indptr[:-1]]
        row_sum = np.asarray(adj.sum(axis=1)).ravel()
        hops.append((adj, cum, start, row_sum, g.offsets[b]))
    t0 = p.types[0]
    n0 = len(g.nodes[t0])
    if n0 == 0 or walks_per_node <= 0 or walk_length <= 0:
        return []
    current = np.tile(np.arange(n0), walks_per_node)
    n_walks = len(current)
    out = np.full((n_walks, walk_length), -1, dtype=np.int64)
    out[:, 0] = current + g.offsets[t0]
    alive = np.ones(n_walks, dtype=bool)
    for step in range(1, walk_length):
        adj, cum, start, row_sum, offset = hops[(step - 1) % len(hops)]
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        u = rng.random(len(idx))
        c = current[idx]
        has = row_sum[c] > 0
        alive[idx[~has]] = False
        idx, c, u = idx[has], c[has], u[has]
        target = start[c] + u * row_sum[c]
        pos = np.searchsorted(cum, target, side="right")
        pos = np.minimum(pos, adj.indptr[c + 1] - 1)
        nxt = adj.indices[pos]
        current[idx] = nxt
        out[idx, step] = nxt + offset
    lengths = (out >= 0).sum(axis=1)
    return [out[w, : lengths[w]].copy() for w in range(n_walks)]
