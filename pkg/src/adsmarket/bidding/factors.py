"""Auction factor (AF) and budget factor (BF)."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np


@dataclass(frozen=True)
class AFKey:
    """Feature groups the AF estimate may condition on.

    Deliberately carries no field for competing bids in the current auction.
    """

    advertiser: int
    query_bin: int
    context_bin: int


@dataclass
class AFModel:
    """Shrunk binned estimate of bid/CPC.

    Within a bin the estimate is the ratio of summed bids to summed CPCs,
    pulled toward the advertiser-level estimate (itself pulled toward the
    prior) with pseudo-count ``shrinkage``. Predictions are clamped to
    ``[1, max_factor]``.
    """

    prior: float = 1.0
    shrinkage: float = 10.0
    max_factor: float = 4.0
    bins: dict = field(default_factory=dict)          # AFKey -> (sum_bid, sum_cpc, n)
    advertisers: dict = field(default_factory=dict)   # advertiser -> (sum_bid, sum_cpc, n)

    @classmethod
    def fit(cls, records: Iterable[tuple[AFKey, float, float]], prior: float = 1.0,
            shrinkage: float = 10.0, max_factor: float = 4.0) -> "AFModel":
        bins: dict = defaultdict(lambda: [0.0, 0.0, 0])
        advs: dict = defaultdict(lambda: [0.0, 0.0, 0])
        for key, bid, cpc in records:
            if cpc <= 0:
                continue
            for table, k in ((bins, key), (advs, key.advertiser)):
                acc = table[k]
                acc[0] += bid
                acc[1] += cpc
                acc[2] += 1
        return cls(prior, shrinkage, max_factor,
                   {k: tuple(v) for k, v in bins.items()}, {k: tuple(v) for k, v in advs.items()})

    def _shrunk(self, stats, parent: float) -> float:
        if stats is None:
            return parent
        sum_bid, sum_cpc, n = stats
        return (n * (sum_bid / sum_cpc) + self.shrinkage * parent) / (n + self.shrinkage)

    def predict(self, key: AFKey) -> float:
        parent = self._shrunk(self.advertisers.get(key.advertiser), self.prior)
        value = self._shrunk(self.bins.get(key), parent)
        return float(min(max(value, 1.0), self.max_factor))

    def table(self, n_advertisers: int, n_query_bins: int, n_context_bins: int) -> np.ndarray:
        """Dense lookup table of predictions for vectorized use."""
        out = np.empty((n_advertisers, n_query_bins, n_context_bins))
        for a in range(n_advertisers):
            for q in range(n_query_bins):
                for c in range(n_context_bins):
                    out[a, q, c] = self.predict(AFKey(a, q, c))
        return out


def compute_af(model: AFModel, key: AFKey) -> float:
    return model.predict(key)


@dataclass
class PacingState:
    """Planned per-bucket spend fractions and a clamped proportional controller."""

    planned: np.ndarray
    gain: float = 10.0
    bf_min: float = 0.1
    bf_max: float = 1.0

    def __post_init__(self):
        self.planned = np.asarray(self.planned, dtype=float)
        if np.any(self.planned < 0) or abs(self.planned.sum() - 1.0) > 1e-9:
            raise ValueError("planned fractions must be non-negative and sum to 1")
        if not 0 < self.bf_min <= self.bf_max:
            raise ValueError("need 0 < bf_min <= bf_max")
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.planned)])

    def planned_cumulative(self, bucket: int, within: float = 0.0) -> float:
        """Planned spend fraction at ``within`` (0..1) of the way through ``bucket``."""
        return float(self.cumulative[bucket] + self.planned[bucket] * within)


class Pacing(NamedTuple):
    factor: float
    skip: bool


def compute_bf(state: PacingState, bucket: int, spent: float, budget: float, within: float = 0.0) -> Pacing:
    """BF = clamp(1 + gain * (planned cumulative fraction - spent / budget))."""
    if budget <= 0 or spent >= budget:
        return Pacing(0.0, True)
    gap = state.planned_cumulative(bucket, within) - spent / budget
    factor = min(max(1.0 + state.gain * gap, state.bf_min), state.bf_max)
    return Pacing(factor, False)


def compute_bf_many(state: PacingState, planned_cum: float, spent: np.ndarray, budget: np.ndarray) -> np.ndarray:
    """Vectorized BF at one point of the day; zero where the budget is gone."""
    frac = np.where(budget > 0, spent / np.where(budget > 0, budget, 1), 1.0)
    bf = np.clip(1.0 + state.gain * (planned_cum - frac), state.bf_min, state.bf_max)
    return np.where(frac >= 1.0, 0.0, bf)


def af_table_from_arrays(adv: np.ndarray, qbin: np.ndarray, cbin: np.ndarray, bid: np.ndarray, cpc: np.ndarray,
                         shape: tuple[int, int, int], prior: float = 1.0, shrinkage: float = 10.0,
                         max_factor: float = 4.0) -> np.ndarray:
    """Same estimate as ``AFModel.fit(...).table(...)``, computed with bincounts."""
    n_adv, nq, nc = shape
    keep = cpc > 0
    adv, qbin, cbin, bid, cpc = adv[keep], qbin[keep], cbin[keep], bid[keep], cpc[keep]
    a_bid = np.bincount(adv, bid, n_adv)
    a_cpc = np.bincount(adv, cpc, n_adv)
    a_n = np.bincount(adv, minlength=n_adv)
    ratio = np.divide(a_bid, a_cpc, out=np.zeros(n_adv), where=a_cpc > 0)
    parent = np.where(a_n > 0, (a_n * ratio + shrinkage * prior) / (a_n + shrinkage), prior)
    flat = (adv * nq + qbin) * nc + cbin
    size = n_adv * nq * nc
    b_bid = np.bincount(flat, bid, size)
    b_cpc = np.bincount(flat, cpc, size)
    b_n = np.bincount(flat, minlength=size)
    b_ratio = np.divide(b_bid, b_cpc, out=np.zeros(size), where=b_cpc > 0)
    par = np.repeat(parent, nq * nc)
    est = np.where(b_n > 0, (b_n * b_ratio + shrinkage * par) / (b_n + shrinkage), par)
    return np.clip(est, 1.0, max_factor).reshape(shape)
