"""Query -> ad targeting: documents, BM25 term retrieval, a two-tower matcher and the merge."""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .embed import KnnIndex, _normalize

INDEX_VERSION = 1
SOURCES = ("keyword", "term", "semantic", "pathsim")
_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text) -> list[str]:
    if not isinstance(text, str):
        text = " ".join(text)
    return _TOKEN.findall(text.lower())


# ---------------------------------------------------------------------------
# documents


@dataclass
class QueryDocument:
    query_id: str
    text: tuple[str, ...]
    session_queries: list = field(default_factory=list)  # co-occurring query texts
    clicked_titles: list = field(default_factory=list)   # creatives of clicked ads

    def terms(self) -> list[str]:
        out = tokenize(self.text)
        for group in (self.session_queries, self.clicked_titles):
            for t in group:
                out += tokenize(t)
        return out


@dataclass
class AdDocument:
    ad_id: str
    text: tuple[str, ...]
    landing: tuple[str, ...]
    clicked_titles: list = field(default_factory=list)    # texts of queries that clicked
    clicked_keywords: list = field(default_factory=list)  # keywords that led to clicks
    clicked_creations: list = field(default_factory=list)  # format ids that were clicked

    def terms(self) -> list[str]:
        out = tokenize(self.text) + tokenize(self.landing)
        for group in (self.clicked_titles, self.clicked_keywords):
            for t in group:
                out += tokenize(t)
        return out


@dataclass
class ClickEvent:
    query: int  # pool index
    ad_id: str
    keyword: Optional[str] = None
    format_id: Optional[str] = None


def build_documents(clicks: Iterable[ClickEvent], cooccur: Mapping[tuple[int, int], int], market,
                    min_support: int = 1) -> tuple[dict, dict]:
    """Query and ad documents; extensions only from events seen ``min_support`` times."""
    ads = {a.id: a for a in market.ads}
    kw_text = {k.id: k.text for adv in market.advertisers for k in adv.keywords}
    pair_counts: Counter = Counter()
    kw_counts: Counter = Counter()
    fmt_counts: Counter = Counter()
    for ev in clicks:
        pair_counts[(ev.query, ev.ad_id)] += 1
        if ev.keyword is not None:
            kw_counts[(ev.ad_id, ev.keyword)] += 1
        if ev.format_id is not None:
            fmt_counts[(ev.ad_id, ev.format_id)] += 1
    qdocs = {}
    for i, q in enumerate(market.queries):
        qdocs[q.id] = QueryDocument(q.id, q.text)
    adocs = {a.id: AdDocument(a.id, a.creative_text, a.landing_terms) for a in market.ads}
    for (qi, ad), c in sorted(pair_counts.items()):
        if c < min_support:
            continue
        qdocs[market.queries[qi].id].clicked_titles.append(" ".join(ads[ad].creative_text))
        adocs[ad].clicked_titles.append(" ".join(market.queries[qi].text))
    for (ad, kw), c in sorted(kw_counts.items()):
        if c >= min_support:
            adocs[ad].clicked_keywords.append(" ".join(kw_text[kw]))
    for (ad, f), c in sorted(fmt_counts.items()):
        if c >= min_support:
            adocs[ad].clicked_creations.append(f)
    for (a, b), c in sorted(cooccur.items()):
        if c >= min_support and a != b:
            qdocs[market.queries[a].id].session_queries.append(" ".join(market.queries[b].text))
            qdocs[market.queries[b].id].session_queries.append(" ".join(market.queries[a].text))
    return qdocs, adocs


# ---------------------------------------------------------------------------
# BM25


class EmptyQuery(ValueError):
    pass


@dataclass
class BM25Index:
    doc_ids: list
    postings: dict          # term -> list of (doc position, term frequency)
    doc_len: np.ndarray
    k1: float = 1.2
    b: float = 0.75

    @classmethod
    def build(cls, docs: Mapping[str, Sequence[str]], k1: float = 1.2, b: float = 0.75) -> "BM25Index":
        ids = sorted(docs)
        postings: dict = defaultdict(list)
        lengths = np.zeros(len(ids))
        for pos, d in enumerate(ids):
            tf = Counter(docs[d])
            lengths[pos] = sum(tf.values())
            for t in sorted(tf):
                postings[t].append((pos, tf[t]))
        return cls(ids, dict(postings), lengths, k1, b)

    @property
    def avg_len(self) -> float:
        return float(self.doc_len.mean()) if len(self.doc_len) else 0.0

    def idf(self, term: str) -> float:
        n = len(self.doc_ids)
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def scores(self, terms: Sequence[str]) -> dict[int, float]:
        out: dict[int, float] = defaultdict(float)
        avg = self.avg_len or 1.0
        for t in sorted(set(terms)):
            idf = self.idf(t)
            for pos, tf in self.postings.get(t, ()):
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[pos] / avg)
                out[pos] += idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out

    def search(self, terms: Sequence[str], k: int) -> list[tuple[str, float]]:
        if not terms:
            raise EmptyQuery("query has no terms after tokenization")
        s = self.scores(terms)
        ranked = sorted(((self.doc_ids[p], v) for p, v in s.items() if v > 0), key=lambda x: (-x[1], x[0]))
        return ranked[:k]

    def to_record(self) -> dict:
        return {"version": INDEX_VERSION, "k1": self.k1, "b": self.b, "doc_ids": self.doc_ids,
                "doc_len": self.doc_len.tolist(), "postings": {t: p for t, p in sorted(self.postings.items())}}

    @classmethod
    def from_record(cls, rec: dict) -> "BM25Index":
        if rec["version"] != INDEX_VERSION:
            raise ValueError("unsupported index version")
        postings = {t: [tuple(x) for x in p] for t, p in rec["postings"].items()}
        return cls(rec["doc_ids"], postings, np.asarray(rec["doc_len"], dtype=float), rec["k1"], rec["b"])


def term_retrieve(index: BM25Index, qdoc: QueryDocument, k: int) -> list[tuple[str, float]]:
    return index.search(qdoc.terms(), k)


# ---------------------------------------------------------------------------
# two-tower matcher


class UntrainedModel(RuntimeError):
    pass


@dataclass
class TwoTower:
    """Mean of term vectors per side, one linear projection per side, cosine score."""

    vocab: dict
    terms: np.ndarray
    Pq: np.ndarray
    Pa: np.ndarray
    temperature: float = 8.0
    trained: bool = False
    history: list = field(default_factory=list)

    def _mean(self, tokens: Sequence[str]) -> np.ndarray:
        ids = [self.vocab[t] for t in tokens if t in self.vocab]
        if not ids:
            return np.zeros(self.terms.shape[1])
        return self.terms[ids].mean(axis=0)

    def encode_query(self, tokens: Sequence[str]) -> np.ndarray:
        return _normalize(self._mean(tokens) @ self.Pq)

    def encode_ad(self, tokens: Sequence[str]) -> np.ndarray:
        return _normalize(self._mean(tokens) @ self.Pa)


def query_tokens(q: QueryDocument) -> list[str]:
    return tokenize(q.text)


def ad_tokens(a: AdDocument) -> list[str]:
    return tokenize(a.text) + tokenize(a.landing)


def init_tower(vocab: dict, term_vectors: np.ndarray, dim: int, rng: np.random.Generator,
               temperature: float = 8.0) -> TwoTower:
    d = term_vectors.shape[1]
    eye = np.eye(d, dim)
    noise = lambda: rng.normal(0.0, 0.1 / np.sqrt(d), (d, dim))
    return TwoTower(vocab, term_vectors.astype(float).copy(), eye + noise(), eye + noise(), temperature)


def _norm_backward(x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through y = x / |x| (row-wise)."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    n = np.where(n > 0, n, 1.0)
    return (dy - y * np.sum(dy * y, axis=-1, keepdims=True)) / n


def tower_loss(model: TwoTower, Mq: np.ndarray, Ma_pos: np.ndarray, Ma_neg: np.ndarray, with_grad: bool = True):
    """Sampled-softmax loss: -log softmax over {positive ad} + negatives of tau * cos.

    Mq, Ma_pos: (B, d) mean term vectors; Ma_neg: (B, M, d).
    """
    xq = Mq @ model.Pq
    q = _normalize(xq)
    xa = np.concatenate([Ma_pos[:, None, :], Ma_neg], axis=1) @ model.Pa
    a = _normalize(xa)
    logits = model.temperature * np.einsum("bd,bmd->bm", q, a)
    mx = logits.max(axis=1, keepdims=True)
    logz = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    loss = float(np.mean(logz - logits[:, 0]))
    if not with_grad:
        return loss, None
    B = len(Mq)
    p = np.exp(logits - logz[:, None])
    p[:, 0] -= 1.0
    dlog = p / B
    dq = model.temperature * np.einsum("bm,bmd->bd", dlog, a)
    da = model.temperature * dlog[:, :, None] * q[:, None, :]
    dxq = _norm_backward(xq, q, dq)
    dxa = _norm_backward(xa, a, da)
    Ma = np.concatenate([Ma_pos[:, None, :], Ma_neg], axis=1)
    gPq = Mq.T @ dxq
    gPa = np.einsum("bmd,bmh->dh", Ma, dxa)
    return loss, {"Pq": gPq, "Pa": gPa}


def train_tower(model: TwoTower, pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
                ad_pool: Sequence[Sequence[str]], epochs: int, negatives: int, rng: np.random.Generator,
                learning_rate: float = 0.05, batch_size: int = 128) -> TwoTower:
    """Fit projections on clicked (query tokens, ad tokens) pairs against random pool ads."""
    if not pairs:
        raise ValueError("no click pairs to train on")
    Mq = np.array([model._mean(q) for q, _ in pairs])
    Ma = np.array([model._mean(a) for _, a in pairs])
    pool = np.array([model._mean(a) for a in ad_pool])
    m1 = {"Pq": np.zeros_like(model.Pq), "Pa": np.zeros_like(model.Pa)}
    m2 = {"Pq": np.zeros_like(model.Pq), "Pa": np.zeros_like(model.Pa)}
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            b = order[start: start + batch_size]
            neg = pool[rng.integers(len(pool), size=(len(b), negatives))]
            loss, g = tower_loss(model, Mq[b], Ma[b], neg)
            total += loss * len(b)
            t += 1
            for k in ("Pq", "Pa"):
                m1[k] = 0.9 * m1[k] + 0.1 * g[k]
                m2[k] = 0.999 * m2[k] + 0.001 * g[k] ** 2
                step = learning_rate * (m1[k] / (1 - 0.9 ** t)) / (np.sqrt(m2[k] / (1 - 0.999 ** t)) + 1e-8)
                setattr(model, k, getattr(model, k) - step)
        model.history.append(total / len(pairs))
    model.trained = True
    return model


def build_ad_index(model: TwoTower, adocs: Mapping[str, AdDocument], seed: int = 0) -> KnnIndex:
    ids = sorted(adocs)
    vecs = np.array([model.encode_ad(ad_tokens(adocs[a])) for a in ids]) if ids else np.zeros((0, model.Pa.shape[1]))
    return KnnIndex(ids, vecs, seed=seed)


def semantic_retrieve(model: TwoTower, index: KnnIndex, qdoc: QueryDocument, k: int) -> list[tuple[str, float]]:
    if not model.trained:
        raise UntrainedModel("two-tower model has not been trained")
    v = model.encode_query(query_tokens(qdoc))
    if not np.any(v):
        return []
    return index.search(v, k, "exact").items


# ---------------------------------------------------------------------------
# keyword source (advanced broad match)


class KeywordMatcher:
    """Advanced broad match: a keyword fires when any of its terms is in the query.

    Score of an ad = best share of one of its keywords' terms present in the query.
    """

    def __init__(self, keywords: Iterable[tuple[str, Sequence[str], Sequence[str]]]):
        self.by_term: dict[str, list[int]] = defaultdict(list)
        self.keywords = []
        for n, (kid, text, ads) in enumerate(keywords):
            self.keywords.append((kid, tuple(text), tuple(ads)))
            for t in set(text):
                self.by_term[t].append(n)

    def match(self, query_terms: Sequence[str], k: int) -> list[tuple[str, float]]:
        qset = set(query_terms)
        best: dict[str, float] = {}
        for n in sorted({n for t in qset for n in self.by_term.get(t, ())}):
            _, text, ads = self.keywords[n]
            share = sum(1 for t in text if t in qset) / len(text)
            for a in ads:
                if share > best.get(a, 0.0):
                    best[a] = share
        return sorted(best.items(), key=lambda x: (-x[1], x[0]))[:k]


# ---------------------------------------------------------------------------
# merge


@dataclass(frozen=True)
class Candidate:
    ad_id: str
    source: str
    raw_score: float
    relevance: float


def normalize_scores(items: Sequence[tuple[str, float]], source: str) -> list[Candidate]:
    """Min-max scale within one source's list; a flat list maps to 1."""
    if not items:
        return []
    vals = [s for _, s in items]
    lo, hi = min(vals), max(vals)
    out = []
    for a, s in items:
        rel = 1.0 if hi == lo else (s - lo) / (hi - lo)
        out.append(Candidate(a, source, float(s), float(rel)))
    return out


def merge_candidates(candidates: Iterable[Candidate], relevance_floor: float) -> list[Candidate]:
    """Keep each ad once with its highest relevance; drop those under the floor."""
    best: dict[str, Candidate] = {}
    for c in candidates:
        if c.relevance < relevance_floor:
            continue
        cur = best.get(c.ad_id)
        if cur is None or (c.relevance, -SOURCES.index(c.source)) > (cur.relevance, -SOURCES.index(cur.source)):
            best[c.ad_id] = c
    return sorted(best.values(), key=lambda c: (-c.relevance, c.ad_id))


@dataclass
class Services:
    """Sub-services for targeting; any may be None (disabled)."""

    qdocs: dict
    keyword: Optional[KeywordMatcher] = None
    bm25: Optional[BM25Index] = None
    tower: Optional[TwoTower] = None
    ad_index: Optional[KnnIndex] = None
    pathsim: Optional[dict] = None

    def source_lists(self, qdoc: QueryDocument, k_each: int) -> dict[str, list[tuple[str, float]]]:
        out = {s: [] for s in SOURCES}
        if self.keyword is not None:
            out["keyword"] = self.keyword.match(tokenize(qdoc.text), k_each)
        if self.bm25 is not None and qdoc.terms():
            out["term"] = term_retrieve(self.bm25, qdoc, k_each)
        if self.tower is not None and self.ad_index is not None:
            out["semantic"] = semantic_retrieve(self.tower, self.ad_index, qdoc, k_each)
        if self.pathsim is not None:
            out["pathsim"] = list(self.pathsim.get(qdoc.query_id, []))[:k_each]
        return out


def target(query, services: Services, k_each: int, relevance_floor: float) -> list[Candidate]:
    """Union of the four sources for one query, deduplicated and floored (at most 4 * k_each)."""
    qdoc = services.qdocs.get(query.id) if hasattr(query, "id") else None
    if qdoc is None:
        qdoc = QueryDocument(getattr(query, "id", ""), tuple(getattr(query, "text", query)))
    lists = services.source_lists(qdoc, k_each)
    cands = []
    for s in SOURCES:
        cands += normalize_scores(lists[s], s)
    return merge_candidates(cands, relevance_floor)


def save_bm25(index: BM25Index, path) -> None:
    Path(path).write_text(json.dumps(index.to_record(), sort_keys=True) + "\n")


def load_bm25(path) -> BM25Index:
    return BM25Index.from_record(json.loads(Path(path).read_text()))


def save_documents(qdocs: Mapping[str, QueryDocument], adocs: Mapping[str, AdDocument], path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "adsmarket-documents", "version": INDEX_VERSION}) + "\n")
        for q in sorted(qdocs):
            d = qdocs[q]
            fh.write(json.dumps({"kind": "query", "id": d.query_id, "text": list(d.text),
                                 "session": d.session_queries, "clicked": d.clicked_titles}) + "\n")
        for a in sorted(adocs):
            d = adocs[a]
            fh.write(json.dumps({"kind": "ad", "id": d.ad_id, "text": list(d.text), "landing": list(d.landing),
                                 "clicked_titles": d.clicked_titles, "clicked_keywords": d.clicked_keywords,
                                 "clicked_creations": d.clicked_creations}) + "\n")


def load_documents(path) -> tuple[dict, dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("version") != INDEX_VERSION:
        raise ValueError("unsupported document store version")
    qdocs, adocs = {}, {}
    for line in lines[1:]:
        r = json.loads(line)
        if r["kind"] == "query":
            qdocs[r["id"]] = QueryDocument(r["id"], tuple(r["text"]), r["session"], r["clicked"])
        else:
            adocs[r["id"]] = AdDocument(r["id"], tuple(r["text"]), tuple(r["landing"]), r["clicked_titles"],
                                        r["clicked_keywords"], r["clicked_creations"])
    return qdocs, adocs
