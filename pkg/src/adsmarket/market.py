"""Synthetic sponsored-search market: domain types, generator, ground truth, ledger."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import MarketConfig
from .creation import Material

MICROS = 1_000_000
MARKET_FORMAT = "adsmarket-market"
MARKET_VERSION = 1
N_BUCKETS = 8


class ContractError(RuntimeError):
    """An operation was invoked outside its documented preconditions."""


def to_micros(amount: float) -> int:
    return int(round(amount * MICROS))


def from_micros(micros: int) -> float:
    return micros / MICROS


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class MatchType(str, Enum):
    EXACT = "exact"
    PHRASE = "phrase"
    BROAD = "broad"


@dataclass(frozen=True)
class Keyword:
    id: str
    text: tuple[str, ...]
    match_type: MatchType

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"keyword {self.id} has empty text")


@dataclass(frozen=True)
class Ad:
    id: str
    advertiser_id: str
    creative_text: tuple[str, ...]
    landing_terms: tuple[str, ...]
    materials: tuple[Material, ...] = ()

    def __post_init__(self):
        if not self.creative_text:
            raise ValueError(f"ad {self.id} has empty creative text")

    @cached_property
    def terms(self) -> frozenset[str]:
        return frozenset(self.creative_text) | frozenset(self.landing_terms)


@dataclass
class AdvertiserProfile:
    id: str
    vertical: int
    keywords: list[Keyword]
    ads: list[Ad]
    daily_budget: float
    target_cpa: float
    roi_floor: float
    sale_value: float
    sale_rate: float
    conversion_type: str = "purchase"
    manual_bids: dict[str, float] = field(default_factory=dict)

    def max_target_cpa(self) -> float:
        return self.sale_value * self.sale_rate / (1.0 + self.roi_floor)

    def check(self) -> None:
        if self.target_cpa <= 0:
            raise ValueError(f"{self.id}: target_cpa must be positive")
        if self.target_cpa > self.max_target_cpa() * (1 + 1e-12):
            raise ValueError(f"{self.id}: target CPA exceeds the ROI-floor cap")
        for ad in self.ads:
            if ad.advertiser_id != self.id:
                raise ValueError(f"ad {ad.id} does not belong to {self.id}")


@dataclass(frozen=True)
class QuerySpec:
    """A distinct query string in the traffic pool."""

    id: str
    text: tuple[str, ...]
    popularity: float


@dataclass(frozen=True)
class Query:
    """One query arrival."""

    id: str
    text: tuple[str, ...]
    user_segment: int
    bucket: int
    pool_index: int = -1

    def __post_init__(self):
        if not 0 <= self.bucket < N_BUCKETS:
            raise ValueError(f"bucket {self.bucket} outside [0, {N_BUCKETS})")


class GroundTruth:
    """Simulator oracle for true CTR, CVR and relevance.

    CTR is logistic in (query/ad term overlap, format quality, segment affinity);
    CVR is logistic in (vertical match, segment affinity, advertiser and
    conversion-type offsets).
    """

    FORMAT_BONUS = {
        "title": 0.0,
        "description": 0.1,
        "image": 0.6,
        "call-button": 0.15,
        "sitelink-row": 0.25,
        "download-button": 0.05,
    }
    MOBILE_DOWNLOAD_BONUS = 0.3
    FILL_BONUS = 0.3
    CONVERSION_TYPE_BIAS = {"purchase": -0.2, "signup": 0.1, "call": 0.0, "download": 0.15}

    def __init__(
        self,
        query_vertical: Sequence[int],
        advertiser_vertical: dict[str, int],
        advertiser_cvr_bias: dict[str, float],
        segment_affinity: dict[str, Sequence[float]],
        traffic_mix: Sequence[float],
        coef: dict[str, float],
        query_index: dict[tuple[str, ...], int],
    ):
        self.query_vertical = np.asarray(query_vertical, dtype=np.int64)
        self.advertiser_vertical = dict(advertiser_vertical)
        self.advertiser_cvr_bias = dict(advertiser_cvr_bias)
        self.segment_affinity = {k: np.asarray(v, dtype=float) for k, v in segment_affinity.items()}
        mix = np.asarray(traffic_mix, dtype=float)
        if len(mix) != N_BUCKETS or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("traffic_mix must be 8 non-negative weights summing to 1")
        self.traffic_mix = mix
        self.coef = dict(coef)
        self.query_index = dict(query_index)

    # -- helpers -------------------------------------------------------
    def _query_vertical(self, query: Query) -> int:
        idx = query.pool_index if query.pool_index >= 0 else self.query_index.get(tuple(query.text), -1)
        return int(self.query_vertical[idx]) if idx >= 0 else -1

    @staticmethod
    def overlap(query_terms: Iterable[str], ad: Ad) -> float:
        terms = list(query_terms)
        if not terms:
            return 0.0
        return sum(1 for t in terms if t in ad.terms) / len(terms)

    def format_quality(self, fmt, segment: int) -> float:
        if fmt is None:
            kinds, fill = ("title", "description"), 1.0
        else:
            kinds, fill = fmt.kinds, fmt.fill_ratio
        quality = sum(self.FORMAT_BONUS.get(k, 0.0) for k in set(kinds)) + self.FILL_BONUS * fill
        if segment == 0 and "download-button" in kinds:
            quality += self.MOBILE_DOWNLOAD_BONUS
        return quality

    def vertical_match(self, query: Query, ad: Ad) -> float:
        return float(self._query_vertical(query) == self.advertiser_vertical[ad.advertiser_id])

    # -- oracle functions ---------------------------------------------
    def ctr(self, query: Query, ad: Ad, fmt=None) -> float:
        c = self.coef
        aff = self.segment_affinity[ad.advertiser_id][query.user_segment]
        z = (
            c["ctr_intercept"]
            + c["ctr_overlap"] * self.overlap(query.text, ad)
            + c["ctr_format"] * self.format_quality(fmt, query.user_segment)
            + c["ctr_segment"] * aff
        )
        return float(sigmoid(z))

    def cvr(self, query: Query, ad: Ad, conversion_type: str) -> float:
        c = self.coef
        aff = self.segment_affinity[ad.advertiser_id][query.user_segment]
        z = (
            c["cvr_intercept"]
            + c["cvr_vertical"] * self.vertical_match(query, ad)
            + c["cvr_segment"] * aff
            + self.advertiser_cvr_bias[ad.advertiser_id]
            + self.CONVERSION_TYPE_BIAS.get(conversion_type, 0.0)
        )
        return float(sigmoid(z))

    def relevance(self, query: Query, ad: Ad) -> float:
        """Ground-truth relevance in [0, 1]: vertical match blended with term overlap."""
        return 0.6 * self.vertical_match(query, ad) + 0.4 * self.overlap(query.text, ad)

    # -- serialization -------------------------------------------------
    def to_record(self) -> dict:
        return {
            "query_vertical": self.query_vertical.tolist(),
            "advertiser_vertical": self.advertiser_vertical,
            "advertiser_cvr_bias": self.advertiser_cvr_bias,
            "segment_affinity": {k: v.tolist() for k, v in self.segment_affinity.items()},
            "traffic_mix": self.traffic_mix.tolist(),
            "coef": self.coef,
        }

    @classmethod
    def from_record(cls, rec: dict, query_index: dict[tuple[str, ...], int]) -> "GroundTruth":
        return cls(
            rec["query_vertical"],
            rec["advertiser_vertical"],
            rec["advertiser_cvr_bias"],
            rec["segment_affinity"],
            rec["traffic_mix"],
            rec["coef"],
            query_index,
        )


@dataclass
class MarketSpec:
    seed: int
    vocab: list[str]
    n_verticals: int
    n_segments: int
    segment_mix: tuple[float, ...]
    conversion_types: tuple[str, ...]
    advertisers: list[AdvertiserProfile]
    queries: list[QuerySpec]
    ground_truth: GroundTruth

    @cached_property
    def ads(self) -> list[Ad]:
        return [ad for adv in self.advertisers for ad in adv.ads]

    @cached_property
    def ad_index(self) -> dict[str, int]:
        return {ad.id: i for i, ad in enumerate(self.ads)}

    @cached_property
    def advertiser_index(self) -> dict[str, int]:
        return {adv.id: i for i, adv in enumerate(self.advertisers)}

    @cached_property
    def ad_advertiser(self) -> np.ndarray:
        """Advertiser position for every ad position."""
        idx = self.advertiser_index
        return np.array([idx[ad.advertiser_id] for ad in self.ads], dtype=np.int64)

    @cached_property
    def query_index(self) -> dict[tuple[str, ...], int]:
        return {q.text: i for i, q in enumerate(self.queries)}

    def advertiser_of(self, ad: Ad) -> AdvertiserProfile:
        return self.advertisers[self.advertiser_index[ad.advertiser_id]]

    def make_query(self, pool_index: int, segment: int, bucket: int, arrival: Optional[int] = None) -> Query:
        spec = self.queries[pool_index]
        qid = spec.id if arrival is None else f"{spec.id}#{arrival}"
        return Query(qid, spec.text, segment, bucket, pool_index)

    # -- serialization -------------------------------------------------
    def to_text(self) -> str:
        lines = [json.dumps({"format": MARKET_FORMAT, "version": MARKET_VERSION}, sort_keys=True)]
        lines.append(json.dumps({
            "record": "meta",
            "seed": self.seed,
            "vocab": self.vocab,
            "n_verticals": self.n_verticals,
            "n_segments": self.n_segments,
            "segment_mix": list(self.segment_mix),
            "conversion_types": list(self.conversion_types),
        }, sort_keys=True))
        for q in self.queries:
            lines.append(json.dumps({"record": "query", "id": q.id, "text": list(q.text),
                                     "popularity": q.popularity}, sort_keys=True))
        for adv in self.advertisers:
            lines.append(json.dumps({"record": "advertiser", **_advertiser_record(adv)}, sort_keys=True))
        lines.append(json.dumps({"record": "ground_truth", **self.ground_truth.to_record()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MarketSpec":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        header = rows[0]
        if header.get("format") != MARKET_FORMAT:
            raise ValueError("not a market file")
        if header.get("version") != MARKET_VERSION:
            raise ValueError(f"unsupported market file version {header.get('version')}")
        meta = next(r for r in rows if r.get("record") == "meta")
        queries = [QuerySpec(r["id"], tuple(r["text"]), r["popularity"])
                   for r in rows if r.get("record") == "query"]
        advertisers = [_advertiser_from_record(r) for r in rows if r.get("record") == "advertiser"]
        gt_rec = next(r for r in rows if r.get("record") == "ground_truth")
        query_index = {q.text: i for i, q in enumerate(queries)}
        return cls(
            seed=meta["seed"],
            vocab=meta["vocab"],
            n_verticals=meta["n_verticals"],
            n_segments=meta["n_segments"],
            segment_mix=tuple(meta["segment_mix"]),
            conversion_types=tuple(meta["conversion_types"]),
            advertisers=advertisers,
            queries=queries,
            ground_truth=GroundTruth.from_record(gt_rec, query_index),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "MarketSpec":
        return cls.from_text(Path(path).read_text())


def _advertiser_record(adv: AdvertiserProfile) -> dict:
    return {
        "id": adv.id,
        "vertical": adv.vertical,
        "keywords": [{"id": k.id, "text": list(k.text), "match_type": k.match_type.value} for k in adv.keywords],
        "ads": [{
            "id": a.id,
            "advertiser_id": a.advertiser_id,
            "creative_text": list(a.creative_text),
            "landing_terms": list(a.landing_terms),
            "materials": [m.to_record() for m in a.materials],
        } for a in adv.ads],
        "daily_budget": adv.daily_budget,
        "target_cpa": adv.target_cpa,
        "roi_floor": adv.roi_floor,
        "sale_value": adv.sale_value,
        "sale_rate": adv.sale_rate,
        "conversion_type": adv.conversion_type,
        "manual_bids": adv.manual_bids,
    }


def _advertiser_from_record(r: dict) -> AdvertiserProfile:
    return AdvertiserProfile(
        id=r["id"],
        vertical=r["vertical"],
        keywords=[Keyword(k["id"], tuple(k["text"]), MatchType(k["match_type"])) for k in r["keywords"]],
        ads=[Ad(a["id"], a["advertiser_id"], tuple(a["creative_text"]), tuple(a["landing_terms"]),
                tuple(Material.from_record(m) for m in a["materials"])) for a in r["ads"]],
        daily_budget=r["daily_budget"],
        target_cpa=r["target_cpa"],
        roi_floor=r["roi_floor"],
        sale_value=r["sale_value"],
        sale_rate=r["sale_rate"],
        conversion_type=r["conversion_type"],
        manual_bids=dict(r["manual_bids"]),
    )


# ---------------------------------------------------------------------------
# generator


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def _round(x: float, digits: int = 6) -> float:
    return float(round(float(x), digits))


def generate_market(seed: int, n_advertisers: int, vocab_size: int,
                    config: Optional[MarketConfig] = None) -> MarketSpec:
    """Build a deterministic synthetic market.

    Queries, keywords and ad texts all draw from one vocabulary partitioned into
    a generic block and one block per vertical, so query/keyword overlap is
    governed by the block sizes and Zipf exponents in ``config``.
    """
    cfg = config or MarketConfig()
    if n_advertisers < 1:
        raise ValueError("need at least one advertiser")
    if vocab_size < 100:
        raise ValueError("vocab_size must be >= 100")
    rng = np.random.default_rng(seed)

    vocab = [f"w{i:04d}" for i in range(vocab_size)]
    n_generic = max(1, int(vocab_size * cfg.generic_fraction))
    generic = vocab[:n_generic]
    blocks = [list(b) for b in np.array_split(np.array(vocab[n_generic:]), cfg.n_verticals)]
    block_w = [_zipf_weights(len(b), cfg.zipf_exponent) for b in blocks]
    generic_w = _zipf_weights(len(generic), cfg.zipf_exponent)

    def draw_terms(vertical: int, n: int) -> list[str]:
        picks = rng.choice(len(blocks[vertical]), size=n, replace=False, p=block_w[vertical])
        return [blocks[vertical][i] for i in picks]

    # -- query pool
    queries: list[QuerySpec] = []
    query_vertical: list[int] = []
    seen: set[tuple[str, ...]] = set()
    popularity = _zipf_weights(cfg.n_queries, cfg.query_popularity_exponent)
    popularity = popularity[rng.permutation(cfg.n_queries)]
    attempts = 0
    while len(queries) < cfg.n_queries:
        attempts += 1
        if attempts > cfg.n_queries * 50:
            raise ValueError("vocabulary too small for the requested query pool")
        v = int(rng.integers(cfg.n_verticals))
        length = int(rng.choice([1, 2, 3], p=[0.3, 0.45, 0.25]))
        terms = draw_terms(v, length)
        if rng.random() < 0.2:
            terms.insert(int(rng.integers(len(terms) + 1)), generic[rng.choice(len(generic), p=generic_w)])
        text = tuple(terms)
        if text in seen:
            continue
        seen.add(text)
        i = len(queries)
        queries.append(QuerySpec(f"q{i:05d}", text, _round(popularity[i], 12)))
        query_vertical.append(v)
    pop = np.array([q.popularity for q in queries])
    queries = [QuerySpec(q.id, q.text, _round(p, 12)) for q, p in zip(queries, pop / pop.sum())]

    # -- advertisers
    match_types = [MatchType.EXACT, MatchType.PHRASE, MatchType.BROAD]
    advertisers: list[AdvertiserProfile] = []
    adv_vertical: dict[str, int] = {}
    cvr_bias: dict[str, float] = {}
    seg_aff: dict[str, list[float]] = {}
    lo_sv, hi_sv = cfg.sale_value_range
    for i in range(n_advertisers):
        aid = f"adv{i:04d}"
        v = i % cfg.n_verticals
        n_kw = int(rng.integers(cfg.keywords_per_advertiser[0], cfg.keywords_per_advertiser[1] + 1))
        keywords = []
        kw_seen: set[tuple[str, ...]] = set()
        while len(keywords) < n_kw:
            text = tuple(draw_terms(v, int(rng.choice([1, 2], p=[0.6, 0.4]))))
            if text in kw_seen:
                continue
            kw_seen.add(text)
            mt = match_types[int(rng.choice(3, p=cfg.match_type_weights))]
            keywords.append(Keyword(f"{aid}-k{len(keywords)}", text, mt))
        n_ads = int(rng.integers(cfg.ads_per_advertiser[0], cfg.ads_per_advertiser[1] + 1))
        ads = []
        kw_terms = list(dict.fromkeys(t for k in keywords for t in k.text))
        for j in range(n_ads):
            picked = [kw_terms[t] for t in rng.choice(len(kw_terms), size=min(2, len(kw_terms)), replace=False)]
            extra = [t for t in draw_terms(v, 3) if t not in picked]
            creative = tuple(picked + extra[:2])
            landing = tuple(t for t in draw_terms(v, cfg.landing_terms) if t not in creative)
            ads.append(Ad(f"{aid}-a{j}", aid, creative, landing, tuple(_draw_materials(rng, creative))))
        sale_value = _round(math.exp(rng.uniform(math.log(lo_sv), math.log(hi_sv))), 4)
        sale_rate = _round(rng.uniform(*cfg.sale_rate_range), 4)
        gamma = _round(rng.uniform(*cfg.roi_floor_range), 4)
        cap = sale_value * sale_rate / (1.0 + gamma)
        target = math.floor(cap * rng.uniform(*cfg.target_slack_range) * 10_000) / 10_000
        budget = _round(target * rng.uniform(*cfg.budget_conversions_range), 2)
        ctype = cfg.conversion_types[int(rng.integers(len(cfg.conversion_types)))]
        bias = _round(rng.normal(0.0, cfg.cvr_advertiser_sd), 6)
        aff = [_round(a, 6) for a in rng.normal(0.0, 0.5, size=cfg.n_segments)]
        adv_vertical[aid] = v
        cvr_bias[aid] = bias
        seg_aff[aid] = aff
        # Manual bidder's belief of CVR on its own-vertical traffic, per keyword.
        mean_aff = float(np.dot(aff, cfg.segment_mix))
        base_cvr = float(sigmoid(cfg.cvr_intercept + cfg.cvr_vertical + cfg.cvr_segment * mean_aff + bias
                                 + GroundTruth.CONVERSION_TYPE_BIAS.get(ctype, 0.0)))
        value_per_conv = sale_value * sale_rate if cfg.manual_value_basis == "break_even" else target
        manual_bids = {
            k.id: _round(value_per_conv * base_cvr * math.exp(rng.normal(-0.5 * cfg.manual_bid_noise ** 2,
                                                                         cfg.manual_bid_noise)), 4)
            for k in keywords
        }
        adv = AdvertiserProfile(aid, v, keywords, ads, budget, target, gamma, sale_value, sale_rate,
                                ctype, manual_bids)
        adv.check()
        advertisers.append(adv)

    coef = {
        "ctr_intercept": cfg.ctr_intercept,
        "ctr_overlap": cfg.ctr_overlap,
        "ctr_format": cfg.ctr_format,
        "ctr_segment": cfg.ctr_segment,
        "cvr_intercept": cfg.cvr_intercept,
        "cvr_vertical": cfg.cvr_vertical,
        "cvr_segment": cfg.cvr_segment,
    }
    mix = np.asarray(cfg.traffic_mix, dtype=float)
    mix = [_round(x, 12) for x in mix / mix.sum()]
    mix[-1] = _round(1.0 - sum(mix[:-1]), 12)
    query_index = {q.text: i for i, q in enumerate(queries)}
    gt = GroundTruth(query_vertical, adv_vertical, cvr_bias, seg_aff, mix, coef, query_index)
    return MarketSpec(seed, vocab, cfg.n_verticals, cfg.n_segments, tuple(cfg.segment_mix),
                      tuple(cfg.conversion_types), advertisers, queries, gt)


def _draw_materials(rng: np.random.Generator, creative: tuple[str, ...]) -> list[Material]:
    mats = [
        Material("text-title", " ".join(creative[:2])),
        Material("text-description", " ".join(creative)),
    ]
    if rng.random() < 0.6:
        mats.append(Material("image", "img", width=8, height=5))
    if rng.random() < 0.4:
        mats.append(Material("phone", "400-000-0000"))
    if rng.random() < 0.3:
        mats.append(Material("app-package", "app.pkg"))
    if rng.random() < 0.5:
        mats.append(Material("sitelink", "links"))
    return mats


# ---------------------------------------------------------------------------
# sampling


def sample_click(gt: GroundTruth, query: Query, ad: Ad, fmt, rng: np.random.Generator) -> bool:
    return bool(rng.random() < gt.ctr(query, ad, fmt))


def sample_conversion(gt: GroundTruth, query: Query, ad: Ad, conversion_type: str,
                      rng: np.random.Generator, clicked: bool) -> bool:
    if not clicked:
        raise ContractError("conversion sampled without a preceding click")
    return bool(rng.random() < gt.cvr(query, ad, conversion_type))


# ---------------------------------------------------------------------------
# ledger


class SimLedger:
    """Per-advertiser running totals for one simulated day (money in micros)."""

    def __init__(self, advertiser_ids: Sequence[str], budgets_micros: Sequence[int]):
        self.advertiser_ids = list(advertiser_ids)
        n = len(self.advertiser_ids)
        self.budget = np.asarray(budgets_micros, dtype=np.int64).copy()
        self.impressions = np.zeros(n, dtype=np.int64)
        self.clicks = np.zeros(n, dtype=np.int64)
        self.conversions = np.zeros(n, dtype=np.int64)
        self.cost = np.zeros(n, dtype=np.int64)

    @property
    def budget_spent(self) -> np.ndarray:
        return self.cost

    def remaining(self) -> np.ndarray:
        return self.budget - self.cost

    def record_impression(self, i: int) -> None:
        self.impressions[i] += 1

    def record_click(self, i: int, cpc_micros: int) -> None:
        if cpc_micros < 0:
            raise ContractError("negative CPC")
        if self.cost[i] + cpc_micros > self.budget[i]:
            raise ContractError(f"budget overrun for {self.advertiser_ids[i]}")
        self.clicks[i] += 1
        self.cost[i] += cpc_micros

    def record_conversion(self, i: int) -> None:
        if self.conversions[i] >= self.clicks[i]:
            raise ContractError("conversion without a click")
        self.conversions[i] += 1

    @staticmethod
    def _ratio(num, den) -> np.ndarray:
        num = np.asarray(num, dtype=float)
        den = np.asarray(den, dtype=float)
        out = np.full(num.shape, np.nan)
        np.divide(num, den, out=out, where=den > 0)
        return out

    def ctr(self) -> np.ndarray:
        return self._ratio(self.clicks, self.impressions)

    def cvr(self) -> np.ndarray:
        return self._ratio(self.conversions, self.clicks)

    def cpc(self) -> np.ndarray:
        return self._ratio(self.cost, self.clicks) / MICROS

    def cpa(self) -> np.ndarray:
        return self._ratio(self.cost, self.conversions) / MICROS

    def merged(self, other: "SimLedger") -> "SimLedger":
        if other.advertiser_ids != self.advertiser_ids:
            raise ValueError("ledgers cover different advertisers")
        out = SimLedger(self.advertiser_ids, self.budget + other.budget)
        for name in ("impressions", "clicks", "conversions", "cost"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    @classmethod
    def combine(cls, ledgers: Sequence["SimLedger"]) -> "SimLedger":
        out = ledgers[0]
        for led in ledgers[1:]:
            out = out.merged(led)
        return out

    def check(self) -> None:
        assert np.all(self.cost <= self.budget), "budget overrun"
        assert np.all(self.clicks <= self.impressions)
        assert np.all(self.conversions <= self.clicks)


def platform_revenue(ledger: SimLedger, form: str = "click") -> float:
    """Total platform revenue, as clicks x CPC or conversions x CPA.

    The conversion form counts an advertiser with spend but no conversions at
    its cost (its CPA is unbounded, the product is still the spend).
    """
    if form == "click":
        cpc = ledger.cpc()
        mask = ledger.clicks > 0
        return float(np.sum(ledger.clicks[mask] * cpc[mask]))
    if form == "conversion":
        cpa = ledger.cpa()
        mask = ledger.conversions > 0
        unconverted = float(np.sum(ledger.cost[~mask])) / MICROS
        return float(np.sum(ledger.conversions[mask] * cpa[mask])) + unconverted
    raise ValueError(f"unknown revenue form {form!r}")
