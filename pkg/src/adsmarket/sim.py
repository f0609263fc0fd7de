"""Daily market simulation, manual vs automated arms, A/B reports.

One market holds both arms: advertisers are split into a manual arm
(static keyword bids, own match types, static creative) and an automated
arm (target-CPA bidding, query->ad targeting, generated formats). Both arms
compete in the same auctions over one query stream per day. The stream and
the click/conversion uniforms come from their own seeded generators, so two
runs that differ only in the automated arm's toggles see identical traffic.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .auction import BankAccount, ReservePolicy, rank_and_price
from .bidding import (ACTIONS, AlphaPolicy, AlphaState, PacingState, alpha_reward, alpha_step, alpha_to_factor,
                      advertiser_scale, af_table_from_arrays, compute_bf_many, discretize, fit_calibrator,
                      pretrained_prior)
from .config import Config
from .creation import build_formats, componentize, generate_templates, select_format
from .embed import train_skipgram
from .hetnet import build_graph, query_ad_index
from .market import MICROS, N_BUCKETS, ContractError, MarketSpec, MatchType, Query, SimLedger, generate_market
from .response import (Impression, ResponseModel, evaluate as evaluate_response, feature_hash, feature_tokens,
                       featurize, predict_cvr, predict_many, train as train_response)
from .retrieval import (BM25Index, ClickEvent, KeywordMatcher, Services, ad_tokens, build_ad_index,
                        build_documents, init_tower, target, tokenize, train_tower)

log = logging.getLogger(__name__)

MANUAL, AUTO = 0, 1
ARM_NAMES = ("manual", "auto")
N_QBINS = 3
N_CBINS = 3
SESSION_CONTINUE = 0.4


# ---------------------------------------------------------------------------
# traffic


@dataclass
class QueryStream:
    """One day of arrivals, ordered by bucket."""

    pool: np.ndarray
    segment: np.ndarray
    bucket: np.ndarray
    session: np.ndarray
    uniforms: np.ndarray  # (n, 2 * slots): click and conversion draws per slot

    def __len__(self) -> int:
        return len(self.pool)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.pool, self.segment, self.bucket, self.session, self.uniforms):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def _cdf(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p)
    return c / c[-1]


def generate_stream(market: MarketSpec, n: int, slots: int, rng: np.random.Generator) -> QueryStream:
    """Arrivals: bucket counts are multinomial in the traffic mix; queries follow
    popularity, and with some probability continue the previous session with
    another query of the same vertical."""
    mix = market.ground_truth.traffic_mix
    counts = rng.multinomial(n, mix) if n > 0 else np.zeros(N_BUCKETS, dtype=np.int64)
    bucket = np.repeat(np.arange(N_BUCKETS), counts)
    pop = np.array([q.popularity for q in market.queries])
    pool = np.searchsorted(_cdf(pop), rng.random(n), side="right")
    pool = np.minimum(pool, len(pop) - 1)
    cont = rng.random(n) < SESSION_CONTINUE
    cont[0:1] = False
    if n:
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        cont[starts[counts > 0]] = False
    session = np.cumsum(~cont) - 1
    qv = market.ground_truth.query_vertical
    follow = rng.random(n)
    by_vertical = {}
    for v in range(market.n_verticals):
        members = np.flatnonzero(qv == v)
        by_vertical[v] = (members, _cdf(pop[members]))
    for i in np.flatnonzero(cont):
        members, cdf = by_vertical[int(qv[pool[i - 1]])]
        pool[i] = members[min(int(np.searchsorted(cdf, follow[i], side="right")), len(members) - 1)]
    segment = np.searchsorted(_cdf(np.asarray(market.segment_mix, dtype=float)), rng.random(n), side="right")
    uniforms = rng.random((n, 2 * slots))
    return QueryStream(pool.astype(np.int64), segment.astype(np.int64), bucket.astype(np.int64),
                       session.astype(np.int64), uniforms)


# ---------------------------------------------------------------------------
# keyword matching for the manual arm


def keyword_matches(query_terms: Sequence[str], keyword_terms: Sequence[str], match_type: MatchType) -> bool:
    """exact: same term sequence; phrase: contiguous run; broad: every keyword term present."""
    q, k = tuple(query_terms), tuple(keyword_terms)
    if match_type == MatchType.EXACT:
        return q == k
    if match_type == MatchType.PHRASE:
        return any(q[i:i + len(k)] == k for i in range(len(q) - len(k) + 1))
    return set(k) <= set(q)


def manual_match_table(market: MarketSpec, advertisers: Sequence[int]) -> list[list[tuple[int, str, float]]]:
    """Per pool query: (advertiser, keyword id, bid) with the highest-bid match per advertiser."""
    by_term: dict[str, list[tuple[int, object]]] = defaultdict(list)
    for a in advertisers:
        adv = market.advertisers[a]
        for kw in adv.keywords:
            by_term[kw.text[0]].append((a, kw))
    out = []
    for q in market.queries:
        best: dict[int, tuple[float, str]] = {}
        seen = set()
        for t in q.text:
            for a, kw in by_term.get(t, ()):
                if kw.id in seen:
                    continue
                seen.add(kw.id)
                if keyword_matches(q.text, kw.text, kw.match_type):
                    bid = market.advertisers[a].manual_bids[kw.id]
                    if a not in best or (bid, kw.id) > best[a]:
                        best[a] = (bid, kw.id)
        out.append(sorted((a, kid, bid) for a, (bid, kid) in best.items()))
    return out


# ---------------------------------------------------------------------------
# prediction cache


class Scorer:
    """Fast CTR/CVR predictions with the response model.

    A head's logit is mean over features of (w . T[feature]) plus bias, so
    per-feature contributions are memoized and summed. Results match
    ``predict_ctr``/``predict_cvr`` up to float summation order.
    """

    def __init__(self, model: ResponseModel):
        self.model = model
        self.memo: dict[tuple[str, str], float] = {}

    def contribution(self, token: str, task: str) -> float:
        key = (token, task)
        v = self.memo.get(key)
        if v is None:
            head = self.model._head(task)
            v = float(self.model.table[feature_hash(token, self.model.bits)] @ head[:-1])
            self.memo[key] = v
        return v

    def predict(self, tokens_wo_bucket: Sequence[str], task: str) -> np.ndarray:
        """Probabilities for all eight buckets, shape (8,)."""
        head = self.model._head(task)
        base = sum(self.contribution(t, task) for t in tokens_wo_bucket)
        n = len(tokens_wo_bucket) + 1
        b = np.array([self.contribution(f"bucket:{k}", task) for k in range(N_BUCKETS)])
        z = (base + b) / n + head[-1]
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class CandidateBlock:
    """Cached per (pool query, segment): everything static about an auction's entries."""

    adv: np.ndarray          # advertiser index per entry
    ad: np.ndarray           # ad index per entry, per bucket (n, 8)
    arm: np.ndarray
    manual_bid: np.ndarray   # micros; 0 for automated entries
    pctr: np.ndarray         # (n, 8)
    pcvr: np.ndarray         # (n, 8)
    gt_ctr: np.ndarray       # (n, 8)
    gt_cvr: np.ndarray       # (n, 8)
    relevance: np.ndarray    # (n, 8)
    fmt: list                # per entry per bucket: format id or "" for the static creative
    keyword: list            # keyword id for manual entries


# ---------------------------------------------------------------------------
# world construction


@dataclass
class World:
    cfg: Config
    market: MarketSpec
    arm: np.ndarray                    # per advertiser
    formats: dict                      # ad id -> list of AdFormat
    model: ResponseModel
    calibrator: object
    cal_pairs: list                    # (pcvr, converted) from history
    manual_matches: list               # per pool query
    auto_keyword_matches: list        # per pool query, native match types (targeting off)
    targeted: list                     # per pool query: ad indices from target()
    services: Optional[Services]
    history_stats: dict
    qbin: np.ndarray                   # per pool query popularity tercile
    group: Optional[np.ndarray] = None  # reporting arm per advertiser; defaults to ``arm``
    graph: object = None                # HetGraph built from the history log
    click_events: list = field(default_factory=list)
    stream_checksums: list = field(default_factory=list)

    def __post_init__(self):
        if self.group is None:
            self.group = self.arm.copy()


def assign_arms(n: int, fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 4])
    arm = np.zeros(n, dtype=np.int64)
    arm[rng.permutation(n)[: int(round(n * fraction))]] = AUTO
    return arm


def arms_from_lists(advertiser_ids: Sequence[str], manual: Sequence[str], auto: Sequence[str]) -> np.ndarray:
    """Arm array from explicit id lists; the lists must partition the advertisers."""
    m, a = set(manual), set(auto)
    if m & a:
        raise ValueError(f"advertisers in both arms: {sorted(m & a)[:5]}")
    ids = set(advertiser_ids)
    if (m | a) != ids:
        missing, unknown = sorted(ids - m - a), sorted((m | a) - ids)
        raise ValueError(f"arms must partition the advertisers (missing {missing[:5]}, unknown {unknown[:5]})")
    return np.array([AUTO if i in a else MANUAL for i in advertiser_ids], dtype=np.int64)


def _impression_tokens(market: MarketSpec, qi: int, ad, segment: int, kinds) -> list[str]:
    adv = market.advertiser_index[ad.advertiser_id]
    return [t for t in feature_tokens(market.queries[qi].text, ad.id, ad.advertiser_id,
                                      market.advertisers[adv].vertical, segment, 0, kinds, ad.terms)
            if not t.startswith("bucket:")]


def run_history(market: MarketSpec, cfg: Config, matches: list, formats: Optional[dict] = None) -> dict:
    """Legacy days before the experiment: everyone bids manually, ranking by bid alone.

    A share of arrivals also shows one unpaid exploration ad in a free slot:
    a random ad (from the query's vertical half of the time) in a random
    format, so the response model sees low-overlap pairs and non-default
    layouts. Produces the logs the models, graph and documents are built from.
    """
    slots = cfg.auction.slots
    decay = np.asarray(cfg.auction.position_decay, dtype=float)
    gt = market.ground_truth
    ads = market.ads
    impressions: list[Impression] = []
    clicks: list[int] = []
    conversions: list[int] = []
    click_events: list[ClickEvent] = []
    match_counts: dict[tuple[int, str], int] = defaultdict(int)
    cooccur: dict[tuple[int, int], int] = defaultdict(int)
    bits = cfg.response.hash_bits
    formats = formats or {}
    ads_by_vertical = defaultdict(list)
    for i, ad in enumerate(ads):
        ads_by_vertical[market.advertisers[market.ad_advertiser[i]].vertical].append(i)
    for h in range(cfg.sim.history_days):
        stream = generate_stream(market, cfg.sim.queries_per_day, slots, np.random.default_rng([cfg.seed, 3, h]))
        explore = np.random.default_rng([cfg.seed, 3, h, 1])
        spent = np.zeros(len(market.advertisers))
        budget = np.array([a.daily_budget for a in market.advertisers])
        prev_session, prev_pool = -1, -1
        for n in range(len(stream)):
            qi, seg, b = int(stream.pool[n]), int(stream.segment[n]), int(stream.bucket[n])
            if stream.session[n] == prev_session and prev_pool != qi:
                key = (min(prev_pool, qi), max(prev_pool, qi))
                cooccur[key] += 1
            prev_session, prev_pool = int(stream.session[n]), qi
            entries = [(bid, a, kid) for a, kid, bid in matches[qi] if budget[a] - spent[a] >= bid]
            entries.sort(key=lambda e: (-e[0], e[1]))
            q = market.make_query(qi, seg, b)
            j = min(len(entries), slots)
            if explore.random() < cfg.sim.history_explore and j < slots:
                pool = ads_by_vertical[int(gt.query_vertical[qi])] if explore.random() < 0.5 else range(len(ads))
                ad = ads[pool[int(explore.integers(len(pool)))]]
                a = market.advertiser_index[ad.advertiser_id]
                fl = formats.get(ad.id, [])
                fmt = fl[int(explore.integers(len(fl)))] if fl and explore.random() < 0.5 else None
                kinds = fmt.kinds if fmt is not None else ("title", "description")
                toks = _impression_tokens(market, qi, ad, seg, kinds) + [f"bucket:{b}"]
                imp = Impression(len(impressions), featurize(toks, bits), market.advertisers[a].conversion_type)
                impressions.append(imp)
                if stream.uniforms[n, 2 * j] < gt.ctr(q, ad, fmt) * decay[j]:
                    clicks.append(imp.id)
                    click_events.append(ClickEvent(qi, ad.id, None, fmt.id if fmt is not None else None))
                    if stream.uniforms[n, 2 * j + 1] < gt.cvr(q, ad, market.advertisers[a].conversion_type):
                        conversions.append(imp.id)
            for j, (bid, a, kid) in enumerate(entries[:slots]):
                nxt = entries[j + 1][0] if j + 1 < len(entries) else cfg.auction.base_reserve
                cpc = min(bid, nxt)
                ad = market.advertisers[a].ads[0]
                toks = _impression_tokens(market, qi, ad, seg, ("title", "description")) + [f"bucket:{b}"]
                imp = Impression(len(impressions), featurize(toks, bits), market.advertisers[a].conversion_type)
                impressions.append(imp)
                match_counts[(qi, kid)] += 1
                if stream.uniforms[n, 2 * j] < gt.ctr(q, ad) * decay[j]:
                    clicks.append(imp.id)
                    spent[a] += cpc
                    click_events.append(ClickEvent(qi, ad.id, kid, None))
                    if stream.uniforms[n, 2 * j + 1] < gt.cvr(q, ad, market.advertisers[a].conversion_type):
                        conversions.append(imp.id)
    return {
        "impressions": impressions,
        "clicks": clicks,
        "conversions": conversions,
        "click_events": click_events,
        "match_counts": dict(match_counts),
        "cooccur": dict(cooccur),
    }


def _held_out_stats(model: ResponseModel, held: list, clicked: set, converted: set) -> dict:
    """Log-loss against the best constant, and mean pcvr against realized CVR, on held-out impressions."""
    if not held:
        return {}
    ids = {imp.id for imp in held}
    out = evaluate_response(model, held, clicked & ids, converted & ids)
    stats = {"ctr_loss": out["ctr"][0], "ctr_baseline": out["ctr"][1]}
    if "cvr" in out:
        stats.update(cvr_loss=out["cvr"][0], cvr_baseline=out["cvr"][1])
        cl = [imp for imp in held if imp.id in clicked]
        pcvr = [predict_cvr(model, imp.features, imp.conversion_type) for imp in cl]
        stats.update(mean_pcvr=float(np.mean(pcvr)),
                     empirical_cvr=float(np.mean([imp.id in converted for imp in cl])))
    return stats


def history_graph(market: MarketSpec, hist: dict, min_support: int = 1):
    """Heterogeneous graph from the history log's clicks, keyword matches and session co-occurrence."""
    click_counts: dict[tuple[str, str], int] = defaultdict(int)
    for ev in hist["click_events"]:
        click_counts[(market.queries[ev.query].id, ev.ad_id)] += 1
    kw_table = [(k.id, adv.id, [a.id for a in adv.ads]) for adv in market.advertisers for k in adv.keywords]
    ad_table = [(a.id, a.advertiser_id) for a in market.ads]
    return build_graph(
        [(q, a, c) for (q, a), c in sorted(click_counts.items())],
        kw_table, ad_table, [q.id for q in market.queries],
        match_log=[(market.queries[q].id, k, c) for (q, k), c in sorted(hist["match_counts"].items())],
        cooccur_log=[(market.queries[a].id, market.queries[b].id, c) for (a, b), c in sorted(hist["cooccur"].items())],
        min_support=min_support,
    )


def pretrain_terms(market: MarketSpec, qdocs: dict, adocs: dict, cfg: Config,
                   rng: np.random.Generator) -> tuple[dict, np.ndarray]:
    """Skip-gram term vectors over ad and query documents; returns (vocab, vectors)."""
    rcfg = cfg.retrieval
    vocab_terms = sorted({t for d in adocs.values() for t in d.terms()} | {t for q in market.queries for t in q.text})
    vocab = {t: i for i, t in enumerate(vocab_terms)}
    sentences = [np.array([vocab[t] for t in d.terms()]) for d in adocs.values()]
    sentences += [np.array([vocab[t] for t in qd.terms()]) for qd in qdocs.values() if len(qd.terms()) > 1]
    terms = train_skipgram(sentences, len(vocab), np.zeros(len(vocab), dtype=np.int64), rcfg.tower_term_dim,
                           cfg.embed.window, cfg.embed.negatives, rcfg.term_pretrain_epochs, rng,
                           cfg.embed.learning_rate, cfg.embed.batch_size)
    return vocab, terms.vectors


def build_world(cfg: Config, market: Optional[MarketSpec] = None, arm: Optional[np.ndarray] = None) -> World:
    t0 = time.time()
    mc = cfg.market
    if market is None:
        market = generate_market(cfg.seed, mc.n_advertisers, mc.vocab_size, mc)
    n_adv = len(market.advertisers)
    if arm is None:
        arm = assign_arms(n_adv, cfg.sim.auto_fraction, cfg.seed)
    else:
        arm = np.array(arm, dtype=np.int64)
        if len(arm) != n_adv or not np.isin(arm, (MANUAL, AUTO)).all():
            raise ValueError("arm must hold one 0/1 entry per advertiser")
    report_group = arm.copy()  # reporting split; differs from the stacks only in A/A runs
    if cfg.sim.auto_stack_on_both:
        arm[:] = AUTO
    auto_advs = [i for i in range(n_adv) if arm[i] == AUTO]

    formats = {}
    cc = cfg.creation
    for a in market.ads:
        comps, _ = componentize(a.materials, prefix=a.id)
        templates = generate_templates(tuple(cc.canvas), comps, cc.max_templates, cc.min_margin)
        formats[a.id] = build_formats(a.id, templates, comps)

    all_matches = manual_match_table(market, range(n_adv))
    hist = run_history(market, cfg, all_matches, formats)

    rng = np.random.default_rng([cfg.seed, 5])
    rc = cfg.response
    model = ResponseModel.init(rc.hash_bits, rc.dim, market.conversion_types, rng, rc.init_scale,
                               rc.learning_rate, rc.epochs)
    clicked = set(hist["clicks"])
    converted = set(hist["conversions"])
    imps = hist["impressions"]
    held_mask = rng.random(len(imps)) < rc.holdout_fraction
    fit_imps = [imp for imp, h in zip(imps, held_mask) if not h]
    held_imps = [imp for imp, h in zip(imps, held_mask) if h]
    fit_ids = {imp.id for imp in fit_imps}
    train_response(model, fit_imps, [c for c in hist["clicks"] if c in fit_ids],
                   [c for c in hist["conversions"] if c in fit_ids], rng, rc.batch_size, rc.cvr_loss_weight)
    held_stats = _held_out_stats(model, held_imps, clicked, converted)

    cl = [imp for imp in fit_imps if imp.id in clicked]
    cal_pairs = []
    for ctype in market.conversion_types:
        group = [imp for imp in cl if imp.conversion_type == ctype]
        if group:
            p = predict_many(model, [imp.features for imp in group], ctype)
            cal_pairs += [(float(x), float(imp.id in converted)) for x, imp in zip(p, group)]
    calibrator = fit_calibrator(cal_pairs, cfg.bid.cf_bins, cfg.bid.cf_min_pairs)


    # targeting services over the automated arm's ads
    auto_set = set(auto_advs)
    gc, rcfg = cfg.graph, cfg.retrieval
    g = history_graph(market, hist, gc.min_support)
    qdocs, adocs = build_documents(hist["click_events"], hist["cooccur"], market, rcfg.doc_min_support)
    auto_ads = {a.id for a in market.ads if market.advertiser_index[a.advertiser_id] in auto_set}
    services = None
    targeted: list = [[] for _ in market.queries]
    if auto_ads:
        ps_index = query_ad_index(g, gc.pathsim_path, gc.pathsim_k * 4, gc.pathsim_neighbor_queries)
        ps_index = {q: [(a, s) for a, s in lst if a in auto_ads][: gc.pathsim_k] for q, lst in ps_index.items()}
        bm25 = BM25Index.build({a: adocs[a].terms() for a in auto_ads}, rcfg.bm25_k1, rcfg.bm25_b)
        term_rng = np.random.default_rng([cfg.seed, 6])
        vocab, term_vectors = pretrain_terms(market, qdocs, adocs, cfg, term_rng)
        tower = init_tower(vocab, term_vectors, rcfg.tower_dim, term_rng, rcfg.tower_temperature)
        pairs = [(tokenize(market.queries[ev.query].text), ad_tokens(adocs[ev.ad_id])) for ev in hist["click_events"]]
        pool = [ad_tokens(adocs[a]) for a in sorted(adocs)]
        train_tower(tower, pairs, pool, rcfg.tower_epochs, rcfg.tower_negatives, term_rng, rcfg.tower_lr)
        ad_index = build_ad_index(tower, {a: adocs[a] for a in auto_ads}, seed=cfg.seed)
        matcher = KeywordMatcher([(k.id, k.text, [a.id for a in adv.ads])
                                  for adv in market.advertisers if market.advertiser_index[adv.id] in auto_set
                                  for k in adv.keywords])
        services = Services(qdocs, matcher, bm25, tower, ad_index, ps_index)
        for i, q in enumerate(market.queries):
            cands = target(market.make_query(i, 0, 0), services, rcfg.k_each, rcfg.relevance_floor)
            targeted[i] = sorted(market.ad_index[c.ad_id] for c in cands)

    manual_matches = [[m for m in row if arm[m[0]] == MANUAL] for row in all_matches]
    auto_kw = [[m for m in row if arm[m[0]] == AUTO] for row in all_matches]
    pop = np.array([q.popularity for q in market.queries])
    ranks = np.argsort(np.argsort(-pop, kind="stable"), kind="stable")
    qbin = np.minimum(ranks * N_QBINS // max(len(pop), 1), N_QBINS - 1)
    stats = {"history_impressions": len(hist["impressions"]), "history_clicks": len(hist["clicks"]),
             "history_conversions": len(hist["conversions"]), "setup_seconds": time.time() - t0,
             "graph_click_edges": g.n_edges("clicks"), **held_stats}
    log.info("world built in %.1fs", stats["setup_seconds"])
    return World(cfg, market, arm, formats, model, calibrator, cal_pairs, manual_matches, auto_kw, targeted,
                 services, stats, qbin, report_group, g, hist["click_events"])


# ---------------------------------------------------------------------------
# simulation


@dataclass
class DayResult:
    day: int
    ledger: SimLedger
    bucket_spend: np.ndarray      # (n_adv, 8) micros
    relevance_sum: np.ndarray     # per arm
    impressions_by_arm: np.ndarray
    auctions: int
    stream_checksum: str
    log_rows: list
    pcvr_sum: np.ndarray = None   # per advertiser, over clicks
    cal_sum: np.ndarray = None    # per advertiser, calibrated cvr over clicks


@dataclass
class SimResult:
    cfg: Config
    days: list
    arm: np.ndarray
    target_cpa: np.ndarray
    violations: dict
    auctions: int
    stream_checksums: list
    bid_rows: list
    world_stats: dict


class Simulation:
    def __init__(self, world: World):
        self.w = world
        cfg = world.cfg
        self.cfg = cfg
        m = world.market
        self.n_adv = len(m.advertisers)
        self.group = world.group
        self.target = np.array([a.target_cpa for a in m.advertisers])
        self.budget_micros = np.array([int(round(a.daily_budget * MICROS)) for a in m.advertisers], dtype=np.int64)
        self.balance = np.zeros(self.n_adv)
        bc = cfg.bid
        self.pacing = PacingState(np.asarray(m.ground_truth.traffic_mix), bc.bf_gain, bc.bf_min, bc.bf_max)
        self.reserve = ReservePolicy(cfg.auction.base_reserve, cfg.auction.reserve_floor,
                                     cfg.auction.reserve_cap, cfg.auction.reserve_slope)
        self.account = BankAccount(0.0, cfg.auction.account_sensitivity, cfg.auction.account_scale,
                                   tuple(cfg.auction.account_bounds))
        self.decay = np.asarray(cfg.auction.position_decay, dtype=float)
        self.slots = cfg.auction.slots
        self.calibrator = world.calibrator
        self.cal_pairs = list(world.cal_pairs)
        self.adv_conv = np.zeros(self.n_adv)
        self.adv_expected = np.zeros(self.n_adv)
        self.adv_scale = np.ones(self.n_adv)
        self.af = np.full((self.n_adv, N_QBINS, N_CBINS), bc.af_prior)
        self.af_window: list = []
        prior = pretrained_prior(bc.alpha_pretrain_episodes, cfg.seed, bc.alpha_discount)
        make = lambda: AlphaPolicy(bc.alpha_learning_rate, bc.alpha_discount, bc.alpha_epsilon, {}, prior, "tid_cd")
        shared = make()
        self.policies = {a: (shared if bc.alpha_shared else make()) for a in range(self.n_adv)
                         if world.arm[a] == AUTO}
        self.alpha_action = np.full(self.n_adv, int(np.flatnonzero(ACTIONS == 0)[0]))
        self.alpha_factor = np.ones(self.n_adv)
        self.alpha_state: dict[int, AlphaState] = {}
        self.ew_cost = np.zeros(self.n_adv)
        self.ew_conv = np.zeros(self.n_adv)
        self.ew_pcvr = np.zeros(self.n_adv)
        self.ew_cal = np.zeros(self.n_adv)
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.cache: dict[tuple[int, int], CandidateBlock] = {}
        self.scorer = Scorer(world.model)
        self.violations = {"price_sandwich": 0, "budget_overrun": 0}
        self.auctions = 0
        self.bid_rows: list = []
        self._cal_version = 0

    # -- candidate blocks --------------------------------------------------
    def _block(self, qi: int, seg: int) -> CandidateBlock:
        key = (qi, seg)
        blk = self.cache.get(key)
        if blk is None:
            blk = self._build_block(qi, seg)
            self.cache[key] = blk
        return blk

    def _predict_pair(self, qi: int, seg: int, ad, fmt) -> tuple[np.ndarray, np.ndarray]:
        kinds = fmt.kinds if fmt is not None else ("title", "description")
        toks = _impression_tokens(self.w.market, qi, ad, seg, kinds)
        ctype = self.w.market.advertisers[self.w.market.advertiser_index[ad.advertiser_id]].conversion_type
        return self.scorer.predict(toks, "ctr"), self.scorer.predict(toks, ctype)

    def _build_block(self, qi: int, seg: int) -> CandidateBlock:
        w, m, sc = self.w, self.w.market, self.cfg.sim
        gt = m.ground_truth
        rows = []  # (adv, ad_idx[8], arm, bid, pctr[8], pcvr[8], gtctr[8], gtcvr[8], rel[8], fmt[8], kw)
        q = m.make_query(qi, seg, 0)
        for a, kid, bid in w.manual_matches[qi]:
            ad = m.advertisers[a].ads[0]
            pctr, pcvr = self._predict_pair(qi, seg, ad, None)
            adx = m.ad_index[ad.id]
            ctype = m.advertisers[a].conversion_type
            rows.append((a, [adx] * 8, MANUAL, int(round(bid * MICROS)), pctr, pcvr,
                         [gt.ctr(q, ad)] * 8, [gt.cvr(q, ad, ctype)] * 8, [gt.relevance(q, ad)] * 8,
                         [""] * 8, kid))
        # automated arm: targeted ads (or native keyword matches when targeting is off)
        if sc.targeting:
            ad_ids = list(w.targeted[qi])
            for a, _, _ in w.auto_keyword_matches[qi]:
                ad_ids += [m.ad_index[x.id] for x in m.advertisers[a].ads]
        else:
            ad_ids = [m.ad_index[x.id] for a, _, _ in w.auto_keyword_matches[qi] for x in m.advertisers[a].ads]
        by_adv: dict[int, list] = defaultdict(list)
        for adx in sorted(set(ad_ids)):
            ad = m.ads[adx]
            by_adv[m.advertiser_index[ad.advertiser_id]].append(ad)
        for a in sorted(by_adv):
            adv = m.advertisers[a]
            options = []  # (score per bucket, ad, fmt, pctr, pcvr)
            for ad in by_adv[a]:
                fmts = w.formats.get(ad.id, []) if sc.creation else []
                preds = {}
                if fmts:
                    for f in fmts:
                        preds[f.id] = self._predict_pair(qi, seg, ad, f)
                else:
                    preds[""] = self._predict_pair(qi, seg, ad, None)
                for b in range(N_BUCKETS):
                    if fmts:
                        chosen = select_format(fmts, adv.target_cpa, b,
                                               lambda bb, f: (preds[f.id][0][bb], preds[f.id][1][bb]))
                        fid, fobj = chosen.id, chosen
                    else:
                        fid, fobj = "", None
                    pctr, pcvr = preds[fid][0][b], preds[fid][1][b]
                    options.append((b, pctr * pcvr, ad, fid, fobj, pctr, pcvr))
            per_bucket = []
            for b in range(N_BUCKETS):
                opts = [o for o in options if o[0] == b]
                opts.sort(key=lambda o: (-o[1], o[2].id))
                per_bucket.append(opts[0])
            rows.append((
                a, [m.ad_index[o[2].id] for o in per_bucket], AUTO, 0,
                np.array([o[5] for o in per_bucket]), np.array([o[6] for o in per_bucket]),
                [gt.ctr(q, o[2], o[4]) for o in per_bucket],
                [gt.cvr(q, o[2], adv.conversion_type) for o in per_bucket],
                [gt.relevance(q, o[2]) for o in per_bucket],
                [o[3] for o in per_bucket], None,
            ))
        rows.sort(key=lambda r: r[0])
        n = len(rows)
        return CandidateBlock(
            adv=np.array([r[0] for r in rows], dtype=np.int64),
            ad=np.array([r[1] for r in rows], dtype=np.int64).reshape(n, N_BUCKETS),
            arm=np.array([r[2] for r in rows], dtype=np.int64),
            manual_bid=np.array([r[3] for r in rows], dtype=np.int64),
            pctr=np.array([r[4] for r in rows], dtype=float).reshape(n, N_BUCKETS),
            pcvr=np.array([r[5] for r in rows], dtype=float).reshape(n, N_BUCKETS),
            gt_ctr=np.array([r[6] for r in rows], dtype=float).reshape(n, N_BUCKETS),
            gt_cvr=np.array([r[7] for r in rows], dtype=float).reshape(n, N_BUCKETS),
            relevance=np.array([r[8] for r in rows], dtype=float).reshape(n, N_BUCKETS),
            fmt=[r[9] for r in rows],
            keyword=[r[10] for r in rows],
        )

    # -- per-advertiser controllers ---------------------------------------
    def _refit_af(self) -> None:
        bc = self.cfg.bid
        window = self.af_window[-bc.af_window_buckets:]
        if not window or not any(len(x[0]) for x in window):
            return
        cat = [np.concatenate([x[i] for x in window]) for i in range(5)]
        self.af = af_table_from_arrays(cat[0].astype(np.int64), cat[1].astype(np.int64), cat[2].astype(np.int64),
                                       cat[3], cat[4], self.af.shape, bc.af_prior, bc.af_shrinkage, bc.af_max)

    def _alpha_state(self, a: int, tid: int, spent: float) -> AlphaState:
        bc = self.cfg.bid
        t = self.target[a]
        k = bc.cpa_prior_conversions
        running = (self.ew_cost[a] + k * t) / (self.ew_conv[a] + k)
        conv = self.ew_conv[a] + k
        pg = (self.ew_pcvr[a] + k - conv) / conv
        cg = (self.ew_cal[a] + k - conv) / conv
        sr = spent / max(self.budget_micros[a] / MICROS, 1e-9)
        return discretize(tid, sr, pg, cg, (running - t) / t)

    def _end_bucket(self, b: int, bucket_cost: np.ndarray, bucket_conv: np.ndarray, bucket_pcvr: np.ndarray,
                    bucket_cal: np.ndarray, spent: np.ndarray, last: bool) -> None:
        bc, sc = self.cfg.bid, self.cfg.sim
        d = bc.cpa_decay
        self.ew_cost = d * self.ew_cost + bucket_cost
        self.ew_conv = d * self.ew_conv + bucket_conv
        self.ew_pcvr = d * self.ew_pcvr + bucket_pcvr
        self.ew_cal = d * self.ew_cal + bucket_cal
        self._refit_af()
        if not sc.alpha:
            return
        k = bc.cpa_prior_conversions
        next_tid = 0 if last else b + 1
        for a, policy in self.policies.items():
            t = self.target[a]
            running = (self.ew_cost[a] + k * t) / (self.ew_conv[a] + k)
            nxt = self._alpha_state(a, next_tid, 0.0 if last else spent[a])
            s = self.alpha_state.get(a)
            if s is not None:
                alpha_step(policy, s, int(self.alpha_action[a]), alpha_reward(running, t), None if last else nxt)
            act = policy.act(nxt, self.rng, explore=True)
            self.alpha_action[a] = act
            self.alpha_factor[a] = alpha_to_factor(float(ACTIONS[act]))
            self.alpha_state[a] = nxt

    # -- one day ---------------------------------------------------------
    def run_day(self, day: int) -> DayResult:
        cfg, w, m = self.cfg, self.w, self.w.market
        sc = cfg.sim
        stream = generate_stream(m, sc.queries_per_day, self.slots, np.random.default_rng([cfg.seed, 1, day]))
        ledger = SimLedger([a.id for a in m.advertisers], self.budget_micros)
        bucket_spend = np.zeros((self.n_adv, N_BUCKETS), dtype=np.int64)
        rel_sum = np.zeros(2)
        imp_by_arm = np.zeros(2, dtype=np.int64)
        rows = []
        day_pcvr = np.zeros(self.n_adv)
        day_cal = np.zeros(self.n_adv)
        counts = np.bincount(stream.bucket, minlength=N_BUCKETS)
        starts = np.concatenate([[0], np.cumsum(counts)])
        cal = self.calibrator
        af_rec = [[], [], [], [], []]
        slots = self.slots
        acc = cfg.auction
        res_base, res_floor, res_cap, res_slope = acc.base_reserve, acc.reserve_floor, acc.reserve_cap, acc.reserve_slope
        lo_b, hi_b = acc.account_bounds
        if self.alpha_state == {} and sc.alpha:
            for a, policy in self.policies.items():
                s = self._alpha_state(a, 0, 0.0)
                act = policy.act(s, self.rng, explore=True)
                self.alpha_action[a] = act
                self.alpha_factor[a] = alpha_to_factor(float(ACTIONS[act]))
                self.alpha_state[a] = s
        for b in range(N_BUCKETS):
            bucket_cost = np.zeros(self.n_adv)
            bucket_conv = np.zeros(self.n_adv)
            bucket_pcvr = np.zeros(self.n_adv)
            bucket_cal = np.zeros(self.n_adv)
            nb = counts[b]
            for n in range(starts[b], starts[b + 1]):
                qi, seg = int(stream.pool[n]), int(stream.segment[n])
                blk = self._block(qi, seg)
                self.auctions += 1
                if len(blk.adv) == 0:
                    if sc.log_auctions:
                        rows.append([day, n, b, m.queries[qi].id, seg, 0, "", "", "", "", "", "", "", ""])
                    continue
                adv = blk.adv
                pctr = blk.pctr[:, b]
                pcvr = blk.pcvr[:, b]
                cvr_global = cal(pcvr)
                cvr_cal = np.minimum(cvr_global * self.adv_scale[adv], 1.0)
                is_ai = blk.arm == AUTO
                bids = blk.manual_bid.copy()
                if is_ai.any():
                    ai = adv[is_ai]
                    cbin = 0 if len(adv) <= 4 else (1 if len(adv) <= 10 else 2)
                    af = self.af[ai, w.qbin[qi], cbin]
                    if sc.pacing:
                        within = (n - starts[b]) / nb if nb else 0.0
                        plan = self.pacing.planned_cumulative(b, within)
                        bf = compute_bf_many(self.pacing, plan, ledger.cost[ai] / MICROS,
                                             self.budget_micros[ai] / MICROS)
                    else:
                        bf = np.ones(len(ai))
                    p_ai = pcvr[is_ai]
                    cf = np.where(p_ai > 0, cvr_cal[is_ai] / np.where(p_ai > 0, p_ai, 1.0), 1.0)
                    alpha = self.alpha_factor[ai]
                    rtb = self.target[ai] * p_ai * af * bf * cf * alpha
                    bids[is_ai] = np.floor(rtb * MICROS + 1e-6).astype(np.int64)
                    if sc.log_auctions and len(self.bid_rows) < 200_000:
                        for k2, a in enumerate(ai):
                            self.bid_rows.append((f"{day}-{n}", m.advertisers[a].id, self.target[a], p_ai[k2],
                                                  af[k2], bf[k2], cf[k2], alpha[k2], bids[is_ai][k2] / MICROS))
                # budget: a bid must fit in what is left today
                remaining = self.budget_micros[adv] - ledger.cost[adv]
                bids = np.where(remaining >= bids, bids, 0)
                mult = res_floor + (res_cap - res_floor) * (1.0 - np.exp(-res_slope * cvr_cal))
                acct = np.clip(1.0 + acc.account_sensitivity * np.tanh(self.balance[adv] / acc.account_scale),
                               lo_b, hi_b)
                reserve = np.ceil(res_base * mult * acct * MICROS - 1e-6).astype(np.int64)
                order, winners, cpc = rank_and_price(bids, pctr, reserve, adv, slots)
                u = stream.uniforms[n]
                log_w = []
                for j, i in enumerate(winners):
                    a = int(adv[i])
                    price = int(cpc[j])
                    if not reserve[i] <= price <= bids[i]:
                        self.violations["price_sandwich"] += 1
                    arm_i = int(blk.arm[i])
                    grp = int(self.group[a])
                    ledger.record_impression(a)
                    imp_by_arm[grp] += 1
                    rel_sum[grp] += blk.relevance[i, b]
                    clicked = u[2 * j] < blk.gt_ctr[i, b] * self.decay[j]
                    conv = False
                    if clicked:
                        if ledger.cost[a] + price > ledger.budget[a]:
                            self.violations["budget_overrun"] += 1
                            raise ContractError(f"budget overrun for advertiser {a}")
                        ledger.record_click(a, price)
                        bucket_spend[a, b] += price
                        self.balance[a] += cvr_cal[i] * self.target[a] - price / MICROS
                        conv = u[2 * j + 1] < blk.gt_cvr[i, b]
                        day_pcvr[a] += pcvr[i]
                        day_cal[a] += cvr_cal[i]
                        self.adv_expected[a] += cvr_global[i]
                        self.adv_conv[a] += conv
                        if conv:
                            ledger.record_conversion(a)
                        if arm_i == AUTO:
                            bucket_cost[a] += price / MICROS
                            bucket_conv[a] += conv
                            bucket_pcvr[a] += pcvr[i]
                            bucket_cal[a] += cvr_cal[i]
                            af_rec[0].append(a)
                            af_rec[1].append(int(w.qbin[qi]))
                            af_rec[2].append(0 if len(adv) <= 4 else (1 if len(adv) <= 10 else 2))
                            af_rec[3].append(bids[i] / MICROS)
                            af_rec[4].append(price / MICROS)
                            self.cal_pairs.append((float(pcvr[i]), float(conv)))
                    log_w.append((a, int(blk.ad[i, b]), grp, int(bids[i]), price, int(reserve[i]),
                                  int(clicked), int(conv), blk.fmt[i][b]))
                if sc.log_auctions:
                    rows.append([
                        day, n, b, m.queries[qi].id, seg, len(adv),
                        ";".join(m.advertisers[x[0]].id for x in log_w),
                        ";".join(m.ads[x[1]].id for x in log_w),
                        ";".join(ARM_NAMES[x[2]] for x in log_w),
                        ";".join(str(x[3]) for x in log_w),
                        ";".join(str(x[4]) for x in log_w),
                        ";".join(str(x[5]) for x in log_w),
                        ";".join(f"{x[6]}{x[7]}" for x in log_w),
                        ";".join(x[8] for x in log_w),
                    ])
            self.af_window.append(tuple(np.array(x, dtype=float) for x in af_rec))
            af_rec = [[], [], [], [], []]
            self._end_bucket(b, bucket_cost, bucket_conv, bucket_pcvr, bucket_cal,
                             ledger.cost / MICROS, b == N_BUCKETS - 1)
        ledger.check()
        # daily recalibration on everything seen so far
        bc = self.cfg.bid
        self.calibrator = fit_calibrator(self.cal_pairs, bc.cf_bins, bc.cf_min_pairs)
        self.adv_scale = advertiser_scale(self.adv_conv, self.adv_expected, bc.cf_advertiser_prior,
                                          tuple(bc.cf_advertiser_bounds))
        return DayResult(day, ledger, bucket_spend, rel_sum, imp_by_arm, len(stream), stream.checksum(), rows,
                         day_pcvr, day_cal)


def run_day(sim: Simulation, day_index: int) -> DayResult:
    return sim.run_day(day_index)


def simulate(cfg: Config, world: Optional[World] = None) -> SimResult:
    world = world or build_world(cfg)
    sim = Simulation(world)
    days = []
    for d in range(cfg.sim.days):
        days.append(sim.run_day(d))
        log.info("day %d done (%d auctions)", d, days[-1].auctions)
    return SimResult(cfg, days, world.group, sim.target, dict(sim.violations), sim.auctions,
                     [d.stream_checksum for d in days], sim.bid_rows, world.history_stats)


# ---------------------------------------------------------------------------
# reporting


def relevance_proxy(outcomes: Sequence[tuple[Query, object]], ground_truth) -> float:
    """Mean ground-truth relevance of the displayed (query, ad) pairs."""
    if not outcomes:
        return 0.0
    return float(np.mean([ground_truth.relevance(q, ad) for q, ad in outcomes]))


def _eval_days(res: SimResult) -> list:
    return [d for d in res.days if d.day >= res.cfg.sim.warmup_days]


def arm_metrics(res: SimResult) -> dict:
    days = _eval_days(res)
    out = {}
    for arm in (MANUAL, AUTO):
        mask = res.arm == arm
        imps = clicks = convs = cost = 0
        rel = 0.0
        shown = 0
        for d in days:
            led = d.ledger
            imps += int(led.impressions[mask].sum())
            clicks += int(led.clicks[mask].sum())
            convs += int(led.conversions[mask].sum())
            cost += int(led.cost[mask].sum())
            rel += float(d.relevance_sum[arm])
            shown += int(d.impressions_by_arm[arm])
        out[ARM_NAMES[arm]] = {
            "advertisers": int(mask.sum()),
            "impressions": imps,
            "revenue": cost / MICROS,
            "clicks": clicks,
            "conversions": convs,
            "cvr": convs / clicks if clicks else float("nan"),
            "cpa": cost / MICROS / convs if convs else float("nan"),
            "relevance": rel / shown if shown else float("nan"),
            "days": len(days),
        }
    return out


def per_advertiser_cpa_ratio(res: SimResult, arm: int = AUTO) -> np.ndarray:
    """Realized CPA / target over the evaluation days, NaN where nothing converted."""
    days = _eval_days(res)
    cost = sum(d.ledger.cost for d in days)
    conv = sum(d.ledger.conversions for d in days)
    idx = np.flatnonzero(res.arm == arm)
    out = np.full(len(idx), np.nan)
    ok = conv[idx] > 0
    out[ok] = cost[idx][ok] / MICROS / conv[idx][ok] / res.target_cpa[idx][ok]
    return out


def spend_fractions(res: SimResult, arm: int = AUTO) -> np.ndarray:
    """Arm-level share of daily spend per bucket over the evaluation days."""
    days = _eval_days(res)
    mask = res.arm == arm
    spend = sum(d.bucket_spend[mask].sum(axis=0) for d in days).astype(float)
    total = spend.sum()
    return spend / total if total > 0 else spend


def pacing_deviation_pp(res: SimResult, arm: int = AUTO) -> float:
    plan = np.asarray(res.cfg.market.traffic_mix, dtype=float)
    plan = plan / plan.sum()
    return float(np.mean(np.abs(spend_fractions(res, arm) - plan)) * 100.0)


@dataclass
class Report:
    arms: dict
    deltas: dict
    cpa_in_band: float
    pacing_pp: float
    auctions: int
    violations: dict
    stream_checksums: list
    config_digest: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(type(x))


def make_report(res: SimResult) -> Report:
    arms = arm_metrics(res)
    deltas = {}
    for k in ("revenue", "clicks", "conversions", "cvr", "cpa", "relevance"):
        a, m = arms["auto"][k], arms["manual"][k]
        deltas[k] = {"abs": a - m, "rel": (a - m) / m if m else float("nan")}
    ratios = per_advertiser_cpa_ratio(res)
    lo, hi = res.cfg.tolerances.cpa_band
    in_band = float(np.mean((ratios >= lo) & (ratios <= hi))) if len(ratios) else float("nan")
    return Report(arms, deltas, in_band, pacing_deviation_pp(res), res.auctions, res.violations,
                  res.stream_checksums, res.cfg.digest())


def write_auction_log(res: SimResult, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["# seed", res.cfg.seed, "config", res.cfg.digest(), "version", __version__])
    w.writerow(["day", "auction", "bucket", "query", "segment", "n_entries", "advertisers", "ads", "arms",
                "bids", "cpc", "reserves", "click_conv", "formats"])
    for d in res.days:
        w.writerows(d.log_rows)


def auction_log_text(res: SimResult) -> str:
    buf = io.StringIO()
    write_auction_log(res, buf)
    return buf.getvalue()


def metrics_from_log(text: str, warmup_days: int) -> dict:
    """Recount per-arm clicks, conversions and revenue from an auction log."""
    out = {name: {"clicks": 0, "conversions": 0, "revenue_micros": 0} for name in ARM_NAMES}
    reader = csv.reader(io.StringIO(text))
    next(reader)
    next(reader)
    for row in reader:
        if int(row[0]) < warmup_days or not row[6]:
            continue
        arms = row[8].split(";")
        cpcs = [int(x) for x in row[10].split(";")]
        cc = row[12].split(";")
        for arm, cpc, flags in zip(arms, cpcs, cc):
            if flags[0] == "1":
                out[arm]["clicks"] += 1
                out[arm]["revenue_micros"] += cpc
                out[arm]["conversions"] += int(flags[1])
    return out


def run_ab(cfg: Config, manual: Optional[Sequence[str]] = None,
           auto: Optional[Sequence[str]] = None) -> tuple[Report, SimResult]:
    """Both arms on one market and one traffic stream per day.

    Without explicit id lists the arms come from a seeded split.
    """
    world = None
    if manual is not None or auto is not None:
        mc = cfg.market
        market = generate_market(cfg.seed, mc.n_advertisers, mc.vocab_size, mc)
        arm = arms_from_lists([a.id for a in market.advertisers], manual or [], auto or [])
        world = build_world(cfg, market, arm)
    res = simulate(cfg, world)
    return make_report(res), res


def advertiser_outcome(res: SimResult, advertiser: int, market: MarketSpec) -> dict:
    """Profit (value per conversion minus CPA, times conversions) over the evaluation days.

    ``roi_ok`` says whether the realized CPA respects the advertiser's ROI floor.
    """
    days = _eval_days(res)
    cost = sum(int(d.ledger.cost[advertiser]) for d in days) / MICROS
    conv = sum(int(d.ledger.conversions[advertiser]) for d in days)
    adv = market.advertisers[advertiser]
    cpa = cost / conv if conv else float("nan")
    return {"conversions": conv, "cost": cost, "cpa": cpa,
            "utility": conv * adv.sale_value * adv.sale_rate - cost,
            "roi_ok": bool(conv == 0 or cpa <= adv.max_target_cpa())}


def truthfulness_probe(cfg: Config, advertiser: int, factors: Sequence[float] = (0.8, 1.0, 1.2),
                       world: Optional[World] = None) -> dict:
    """Run the market once per reported-target factor for one automated advertiser.

    Only that advertiser's reported target CPA changes; traffic, rivals and
    the trained models are shared. Returns factor -> advertiser_outcome.
    """
    world = world or build_world(cfg)
    if world.arm[advertiser] != AUTO:
        raise ValueError("the probed advertiser must be in the automated arm")
    out = {}
    for f in factors:
        sim = Simulation(world)
        sim.target[advertiser] *= f
        days = [sim.run_day(d) for d in range(cfg.sim.days)]
        res = SimResult(cfg, days, world.group, sim.target, dict(sim.violations), sim.auctions,
                        [d.stream_checksum for d in days], sim.bid_rows, world.history_stats)
        out[f] = advertiser_outcome(res, advertiser, world.market)
    return out
