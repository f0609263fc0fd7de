"""Target-CPA bidding language and the multiplicative real-time bid."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional

from ..market import MICROS

FACTOR_NAMES = ("cpa", "pcvr", "af", "bf", "cf", "alpha")


def roi_to_target_cpa(sale_value: float, sale_rate: float, roi_floor: float) -> float:
    """Largest CPA that keeps ROI at or above ``roi_floor``."""
    if roi_floor < 0:
        raise ValueError("roi_floor must be >= 0")
    value = sale_value * sale_rate
    if value <= 0:
        raise ValueError("expected sale value must be positive")
    return value / (1.0 + roi_floor)


def roi_at(cpa: float, sale_value: float, sale_rate: float) -> float:
    """ROI = (value per conversion - CPA) / CPA."""
    return (sale_value * sale_rate - cpa) / cpa


@dataclass(frozen=True)
class BidContext:
    advertiser_id: str
    target_cpa: float
    ad_id: str
    query_id: str
    pcvr: float
    pctr: float
    bucket: int
    daily_budget: float
    spent: float
    elapsed_fraction: float = 0.0
    running_cpa: Optional[float] = None

    def __post_init__(self):
        if not self.target_cpa > 0:
            raise ValueError("target_cpa must be positive")
        if not (0.0 <= self.pcvr <= 1.0 and 0.0 <= self.pctr <= 1.0):
            raise ValueError("pcvr and pctr must be probabilities")


@dataclass(frozen=True)
class BidDecision:
    rtb: float
    rtb_micros: int
    factors: dict
    skip: bool = False


def quantize_bid(value: float) -> int:
    """Round a bid down to whole micros."""
    return int(math.floor(value * MICROS + 1e-6))


def compute_rtb(ctx: BidContext, af: float, bf: float, cf: float, alpha: float) -> BidDecision:
    """RTB = CPA * pcvr * AF * BF * CF * Alpha, with the breakdown recorded."""
    factors = {"cpa": ctx.target_cpa, "pcvr": ctx.pcvr, "af": af, "bf": bf, "cf": cf, "alpha": alpha}
    for name, value in factors.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite {name} factor: {value}")
        if value < 0:
            raise ValueError(f"negative {name} factor: {value}")
    product = 1.0
    for name in FACTOR_NAMES:
        product *= factors[name]
    micros = quantize_bid(product)
    return BidDecision(micros / MICROS, micros, factors)


def skipped_decision(ctx: BidContext) -> BidDecision:
    return BidDecision(0.0, 0, {"cpa": ctx.target_cpa, "pcvr": ctx.pcvr, "af": 0.0, "bf": 0.0,
                                "cf": 0.0, "alpha": 0.0}, skip=True)


BID_LOG_FIELDS = ("auction", "advertiser") + FACTOR_NAMES + ("rtb",)


def write_bid_log(path, rows: Iterable[tuple]) -> None:
    """Rows are (auction id, advertiser id, cpa, pcvr, af, bf, cf, alpha, rtb)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BID_LOG_FIELDS)
        for row in rows:
            w.writerow([row[0], row[1]] + [f"{float(x):.9g}" for x in row[2:]])
