from collections import Counter

import numpy as np
import pytest

from adsmarket.market import Query
from adsmarket.retrieval import (SOURCES, AdDocument, BM25Index, Candidate, ClickEvent, EmptyQuery, KeywordMatcher,
                                 QueryDocument, Services, UntrainedModel, build_ad_index, build_documents, init_tower,
                                 load_bm25, load_documents, merge_candidates, normalize_scores, save_bm25,
                                 save_documents, semantic_retrieve, target, term_retrieve, tokenize, train_tower)

from oracles import bm25_full_scan


def test_tokenize_lowercases_and_splits():
    assert tokenize("Cheap, Flights-to PARIS!") == ["cheap", "flights", "to", "paris"]
    assert tokenize(("a", "B")) == ["a", "b"]


# -- documents ------------------------------------------------------------------

def test_unclicked_ad_document_is_text_and_landing(small_world):
    m = small_world.market
    qdocs, adocs = build_documents([], {}, m)
    ad = m.ads[0]
    assert adocs[ad.id].terms() == list(ad.creative_text) + list(ad.landing_terms)
    assert qdocs[m.queries[0].id].terms() == list(m.queries[0].text)


def test_clicked_keyword_enters_ad_document(small_world):
    m = small_world.market
    adv = m.advertisers[0]
    kw = adv.keywords[0]
    _, adocs = build_documents([ClickEvent(0, adv.ads[0].id, kw.id)], {}, m)
    assert set(kw.text) <= set(adocs[adv.ads[0].id].terms())


def test_document_terms_recount(small_world):
    m = small_world.market
    rng = np.random.default_rng(0)
    events = [ClickEvent(int(rng.integers(len(m.queries))), m.ads[int(rng.integers(len(m.ads)))].id)
              for _ in range(300)]
    events += events[:50]
    cooccur = {(1, 2): 3, (2, 5): 1}
    qdocs, adocs = build_documents(events, cooccur, m, min_support=2)
    pairs = Counter((e.query, e.ad_id) for e in events)
    for ad in m.ads[:20]:
        want = Counter(list(ad.creative_text) + list(ad.landing_terms))
        for (qi, a), c in pairs.items():
            if a == ad.id and c >= 2:
                want.update(m.queries[qi].text)
        assert Counter(adocs[ad.id].terms()) == want
    q1 = qdocs[m.queries[1].id]
    assert q1.session_queries == [" ".join(m.queries[2].text)]
    assert qdocs[m.queries[5].id].session_queries == []


def test_document_store_round_trip(tmp_path, small_world):
    qdocs, adocs = build_documents([ClickEvent(0, small_world.market.ads[0].id)], {(0, 1): 1}, small_world.market)
    save_documents(qdocs, adocs, tmp_path / "docs.jsonl")
    q2, a2 = load_documents(tmp_path / "docs.jsonl")
    assert q2 == qdocs and a2 == adocs


# -- term retrieval ----------------------------------------------------------------

def _corpus(rng, n=200, vocab=60):
    return {f"d{i:03d}": [f"t{int(v)}" for v in rng.zipf(1.3, size=int(rng.integers(3, 30))) % vocab]
            for i in range(n)}


def test_absent_term_gives_nothing():
    idx = BM25Index.build({"a": ["x", "y"], "b": ["y"]})
    assert idx.search(["zzz"], 5) == []
    with pytest.raises(EmptyQuery):
        idx.search([], 5)
    with pytest.raises(EmptyQuery):
        term_retrieve(idx, QueryDocument("q", ("!!",)), 5)


def test_single_matching_ad_ranks_first():
    idx = BM25Index.build({"a": ["x", "y"], "b": ["y", "z"], "c": ["unique", "y"]})
    assert idx.search(["unique"], 3)[0][0] == "c"


def test_bm25_matches_full_scan():
    rng = np.random.default_rng(1)
    docs = _corpus(rng)
    idx = BM25Index.build(docs)
    for _ in range(30):
        q = [f"t{int(v)}" for v in rng.integers(0, 60, size=int(rng.integers(1, 5)))]
        got = idx.search(q, 10)
        want = bm25_full_scan(docs, q)[:10]
        assert [d for d, _ in got] == [d for d, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want], rtol=1e-12)


def test_bm25_file_round_trip(tmp_path):
    docs = _corpus(np.random.default_rng(2), 30)
    idx = BM25Index.build(docs)
    save_bm25(idx, tmp_path / "bm25.json")
    back = load_bm25(tmp_path / "bm25.json")
    assert back.search(["t1", "t2"], 10) == idx.search(["t1", "t2"], 10)


# -- semantic retrieval --------------------------------------------------------------

def _vertical_corpus(rng, n_verticals=10, ads_per=100, terms_per=20, n_clicks=6000):
    vocab = {f"v{v}w{t}": v * terms_per + t for v in range(n_verticals) for t in range(terms_per)}
    ads = {}
    for v in range(n_verticals):
        for j in range(ads_per):
            ads[f"v{v}a{j:03d}"] = AdDocument(f"v{v}a{j:03d}",
                                              tuple(f"v{v}w{int(t)}" for t in rng.choice(terms_per, 4, replace=False)),
                                              ())
    clicks = []
    for _ in range(n_clicks):
        v = int(rng.integers(n_verticals))
        ad = f"v{v}a{int(rng.integers(ads_per)):03d}"
        q = [ads[ad].text[int(rng.integers(4))], f"v{v}w{int(rng.integers(terms_per))}"]
        clicks.append((q, ad))
    return vocab, ads, clicks


def _tower(rng, vocab, ads, clicks, epochs=4):
    tower = init_tower(vocab, rng.normal(0, 1, (len(vocab), 16)), 16, rng)
    pool = [list(a.text) for a in ads.values()]
    return train_tower(tower, [(q, list(ads[a].text)) for q, a in clicks], pool, epochs, 10, rng)


def test_untrained_tower_is_rejected():
    rng = np.random.default_rng(3)
    vocab = {"a": 0, "b": 1}
    tower = init_tower(vocab, rng.normal(size=(2, 4)), 4, rng)
    index = build_ad_index(tower, {"x": AdDocument("x", ("a",), ())})
    with pytest.raises(UntrainedModel):
        semantic_retrieve(tower, index, QueryDocument("q", ("a",)), 1)


def test_identical_document_ranks_first_with_shared_tower():
    rng = np.random.default_rng(4)
    vocab, ads, clicks = _vertical_corpus(rng, 3, 20, 10, 300)
    tower = _tower(rng, vocab, ads, clicks, epochs=1)
    tower.Pa = tower.Pq.copy()
    index = build_ad_index(tower, ads)
    target_ad = ads["v1a007"]
    got = semantic_retrieve(tower, index, QueryDocument("q", target_ad.text), 1)
    assert got[0][1] == pytest.approx(1.0)
    assert tower.encode_ad(list(ads[got[0][0]].text)) @ tower.encode_query(list(target_ad.text)) == \
        pytest.approx(1.0)


def test_vertical_clicks_pull_same_vertical_ads_up_and_beat_random():
    rng = np.random.default_rng(5)
    vocab, ads, clicks = _vertical_corpus(rng)
    train, held = clicks[:5000], clicks[5000:]
    tower = _tower(rng, vocab, ads, train)
    index = build_ad_index(tower, ads)
    intra, inter, hits = [], [], 0
    for q, ad in held:
        res = semantic_retrieve(tower, index, QueryDocument("q", tuple(q)), 50)
        v = ad.split("a")[0]
        same = [s for a, s in res if a.startswith(v + "a")]
        other = [s for a, s in res if not a.startswith(v + "a")]
        intra += same
        inter += other
        hits += any(a == ad for a, _ in res)
    assert not inter or np.mean(intra) > np.mean(inter)
    recall = hits / len(held)
    assert recall > 5 * 50 / len(ads)


# -- merge and target ----------------------------------------------------------------

def test_all_sources_empty_gives_empty_set():
    assert target(Query("q", ("a",), 0, 0), Services({}), 5, 0.0) == []


def test_duplicate_ad_kept_once_with_max_relevance():
    cands = [Candidate("x", "term", 3.0, 0.4), Candidate("x", "semantic", 0.9, 0.8), Candidate("y", "term", 1, 1.0)]
    out = merge_candidates(cands, 0.0)
    assert [c.ad_id for c in out] == ["y", "x"]
    assert out[1].relevance == 0.8 and out[1].source == "semantic"


def test_normalize_scores_min_max():
    out = normalize_scores([("a", 3.0), ("b", 1.0), ("c", 2.0)], "term")
    assert [c.relevance for c in out] == [1.0, 0.0, 0.5]
    assert normalize_scores([("a", 7.0)], "term")[0].relevance == 1.0


def test_merge_idempotent_and_floor_monotone():
    rng = np.random.default_rng(6)
    cands = [Candidate(f"a{int(rng.integers(30))}", SOURCES[int(rng.integers(4))], float(r), float(r))
             for r in rng.random(80)]
    once = merge_candidates(cands, 0.2)
    assert merge_candidates(once, 0.2) == once
    prev = None
    for floor in np.linspace(0, 1, 11):
        ids = {c.ad_id for c in merge_candidates(cands, floor)}
        assert prev is None or ids <= prev
        prev = ids


def test_keyword_matcher_advanced_broad():
    m = KeywordMatcher([("k1", ("red", "shoes"), ("a1",)), ("k2", ("blue",), ("a2",))])
    assert m.match(["red", "boots"], 5) == [("a1", 0.5)]
    assert m.match(["blue", "red", "shoes"], 5) == [("a1", 1.0), ("a2", 1.0)]


def test_target_properties_on_market(small_world):
    w = small_world
    svc = w.services
    k = w.cfg.retrieval.k_each
    for qi in range(0, len(w.market.queries), 7):
        q = w.market.make_query(qi, 0, 0)
        full = target(q, svc, k, w.cfg.retrieval.relevance_floor)
        assert len(full) <= 4 * k
        assert len({c.ad_id for c in full}) == len(full)
        lists = svc.source_lists(svc.qdocs[q.id], k)
        for s in SOURCES:
            off = Services(svc.qdocs, **{n: getattr(svc, n) for n in ("keyword", "bm25", "tower", "ad_index",
                                                                      "pathsim")})
            attr = {"keyword": "keyword", "term": "bm25", "semantic": "tower", "pathsim": "pathsim"}[s]
            setattr(off, attr, None)
            other = off.source_lists(svc.qdocs[q.id], k)
            for t in SOURCES:
                if t != s:
                    assert other[t] == lists[t]


def test_union_recall_beats_keyword_only(small_world):
    w = small_world
    m, gt, svc = w.market, w.market.ground_truth, w.services
    auto_ads = [a for a in m.ads if w.arm[m.advertiser_index[a.advertiser_id]] == 1]
    kw_only = Services(svc.qdocs, keyword=svc.keyword)
    full_hits = kw_hits = total = 0
    for qi in range(len(m.queries)):
        q = m.make_query(qi, 0, 0)
        relevant = {a.id for a in auto_ads if gt.relevance(q, a) >= 0.7}
        if not relevant:
            continue
        total += len(relevant)
        full = {c.ad_id for c in target(q, svc, 25, 0.0)[:100]}
        kw = {c.ad_id for c in target(q, kw_only, 100, 0.0)[:100]}
        full_hits += len(relevant & full)
        kw_hits += len(relevant & kw)
    assert full_hits / total > kw_hits / total
