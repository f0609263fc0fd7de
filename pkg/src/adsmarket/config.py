"""Run configuration.

Every tunable of the simulator lives here so a single JSON file (plus a seed)
fully determines a run. Nested sections mirror the package modules.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

# Two-peak daily curve over the eight 3-hour buckets (late morning, evening).
DEFAULT_TRAFFIC_MIX = (0.04, 0.06, 0.15, 0.17, 0.12, 0.13, 0.20, 0.13)


@dataclass
class MarketConfig:
    n_advertisers: int = 200
    vocab_size: int = 600
    n_verticals: int = 10
    n_queries: int = 2400
    n_segments: int = 3
    segment_mix: tuple[float, ...] = (0.5, 0.3, 0.2)
    generic_fraction: float = 0.1
    zipf_exponent: float = 0.3
    query_popularity_exponent: float = 0.5
    keywords_per_advertiser: tuple[int, int] = (3, 6)
    ads_per_advertiser: tuple[int, int] = (1, 3)
    landing_terms: int = 12
    match_type_weights: tuple[float, float, float] = (0.2, 0.3, 0.5)  # exact, phrase, broad
    conversion_types: tuple[str, ...] = ("purchase", "signup", "call", "download")
    # Advertiser economics.
    sale_value_range: tuple[float, float] = (100.0, 250.0)  # log-uniform
    sale_rate_range: tuple[float, float] = (0.4, 0.7)
    roi_floor_range: tuple[float, float] = (0.2, 0.6)
    target_slack_range: tuple[float, float] = (0.85, 1.0)
    budget_conversions_range: tuple[float, float] = (150.0, 300.0)  # daily budget in target-CPA units
    manual_bid_noise: float = 0.3
    manual_value_basis: str = "break_even"  # or "target"
    # Ground-truth response coefficients (logistic).
    ctr_intercept: float = -3.5
    ctr_overlap: float = 5.0
    ctr_format: float = 1.0
    ctr_segment: float = 0.4
    cvr_intercept: float = -3.0
    cvr_vertical: float = 2.2
    cvr_segment: float = 0.4
    cvr_advertiser_sd: float = 0.3
    traffic_mix: tuple[float, ...] = DEFAULT_TRAFFIC_MIX


@dataclass
class ResponseConfig:
    hash_bits: int = 18
    dim: int = 8
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 256
    cvr_loss_weight: float = 1.0
    init_scale: float = 0.01
    holdout_fraction: float = 0.1


@dataclass
class GraphConfig:
    min_support: int = 1
    pathsim_k: int = 20
    pathsim_neighbor_queries: int = 10
    pathsim_path: str = "query-clicks-ad-clicks-query"
    walk_paths: tuple[str, ...] = ("query-clicks-ad-clicks-query", "ad-clicks-query-clicks-ad")
    # Query-anchored paths used for PathSim propagation and aggregator guidance.
    meta_paths: tuple[str, ...] = (
        "query-clicks-ad-clicks-query-clicks-ad",
        "query-matches-keyword-belongs-ad",
        "query-cooccurs-query-clicks-ad",
    )


@dataclass
class EmbedConfig:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    walks_per_node: int = 10
    walk_length: int = 40
    epochs: int = 2
    learning_rate: float = 0.025
    batch_size: int = 512
    ivf_lists: int = 0  # 0 -> sqrt(n)
    ivf_probes: int = 0  # 0 -> ceil(3/4 of lists)
    aggregator_hidden: int = 16
    aggregator_epochs: int = 20
    aggregator_lr: float = 0.05


@dataclass
class RetrievalConfig:
    k_each: int = 12
    relevance_floor: float = 0.05
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    doc_min_support: int = 1
    tower_dim: int = 32
    tower_term_dim: int = 32
    tower_epochs: int = 4
    tower_negatives: int = 15
    tower_lr: float = 0.05
    tower_temperature: float = 8.0
    term_pretrain_epochs: int = 2


@dataclass
class BidConfig:
    af_prior: float = 1.0
    af_shrinkage: float = 10.0
    af_max: float = 4.0
    af_window_buckets: int = 16
    bf_gain: float = 10.0
    bf_min: float = 0.1
    bf_max: float = 1.0
    cf_min_pairs: int = 200
    cf_bins: int = 20
    cf_advertiser_prior: float = 20.0  # pseudo-conversions behind the per-advertiser scale
    cf_advertiser_bounds: tuple[float, float] = (0.5, 2.0)
    alpha_learning_rate: float = 0.05
    alpha_discount: float = 0.9
    alpha_epsilon: float = 0.0
    alpha_shared: bool = False
    alpha_pretrain_episodes: int = 4000
    cpa_prior_conversions: float = 3.0
    cpa_decay: float = 0.9  # per-bucket decay of running CPA stats


@dataclass
class AuctionConfig:
    slots: int = 3
    max_slots: int = 10
    position_decay: tuple[float, ...] = (1.0, 0.7, 0.5)
    base_reserve: float = 0.05
    reserve_floor: float = 0.5
    reserve_cap: float = 2.0
    reserve_slope: float = 5.0
    account_sensitivity: float = 0.2
    account_scale: float = 50.0
    account_bounds: tuple[float, float] = (0.8, 1.25)


@dataclass
class CreationConfig:
    canvas: tuple[int, int] = (24, 9)
    max_templates: int = 8
    min_margin: float = 1.0


@dataclass
class SimConfig:
    days: int = 14
    warmup_days: int = 4
    queries_per_day: int = 16000
    history_days: int = 2
    history_explore: float = 0.3  # share of history arrivals that also show a random exploration ad
    auto_fraction: float = 0.5
    targeting: bool = True
    creation: bool = True
    pacing: bool = True
    alpha: bool = True
    auto_stack_on_both: bool = False  # A/A diagnostics
    log_auctions: bool = True


@dataclass
class Tolerances:
    pathsim_abs: float = 1e-12
    revenue_rel: float = 1e-9
    gradient_rel: float = 1e-4
    cpa_band: tuple[float, float] = (0.9, 1.1)
    cpa_pass_fraction: float = 0.8
    pacing_on_max_pp: float = 5.0
    pacing_off_min_pp: float = 15.0
    alpha_agreement: float = 0.9
    knn_recall: float = 0.95
    packing_ratio: float = 0.9
    significance: float = 0.05


@dataclass
class Config:
    seed: int = 7
    market: MarketConfig = field(default_factory=MarketConfig)
    response: ResponseConfig = field(default_factory=ResponseConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    bid: BidConfig = field(default_factory=BidConfig)
    auction: AuctionConfig = field(default_factory=AuctionConfig)
    creation: CreationConfig = field(default_factory=CreationConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections: dict[str, Any]) -> "Config":
        """Copy with per-section overrides, e.g. ``cfg.replace(sim={"days": 2})``."""
        data = self.to_dict()
        for name, values in sections.items():
            if name == "seed":
                data["seed"] = values
                continue
            if name not in data:
                raise KeyError(f"unknown config section {name!r}")
            data[name].update(values)
        return Config.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        kwargs: dict[str, Any] = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            if f.name == "seed":
                kwargs["seed"] = int(value)
            else:
                section_cls = type(getattr(cls(), f.name))
                kwargs[f.name] = _build_section(section_cls, value)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise KeyError(f"unknown config sections: {sorted(unknown)}")
        return cls(**kwargs)


def _build_section(section_cls: type, values: dict[str, Any]) -> Any:
    names = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise KeyError(f"unknown keys for {section_cls.__name__}: {sorted(unknown)}")
    defaults = section_cls()
    kwargs = {}
    for key, value in values.items():
        if isinstance(getattr(defaults, key), tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return section_cls(**kwargs)


def load_config(path: Optional[str | Path] = None, seed: Optional[int] = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg = Config.from_dict(json.loads(Path(path).read_text()))
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
