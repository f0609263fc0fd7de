"""Next-price auction with personalized CVR-based reserves and bank accounts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .market import MICROS


@dataclass(frozen=True)
class AuctionEntry:
    ad_id: str
    advertiser: str
    bid_micros: int
    pctr: float
    pcvr: float

    def __post_init__(self):
        if self.bid_micros < 0:
            raise ValueError("bids must be non-negative")

    @property
    def bid(self) -> float:
        return self.bid_micros / MICROS


@dataclass(frozen=True)
class AuctionRequest:
    query_id: str
    slots: int
    entries: tuple[AuctionEntry, ...]
    max_slots: int = 10

    def __post_init__(self):
        if not 1 <= self.slots <= self.max_slots:
            raise ValueError(f"slots must be in [1, {self.max_slots}]")


@dataclass(frozen=True)
class ReservePolicy:
    """reserve = base * multiplier(cvr), multiplier rising from ``floor`` toward ``cap``."""

    base: float = 0.05
    floor: float = 0.5
    cap: float = 2.0
    slope: float = 5.0

    def __post_init__(self):
        if self.base < 0 or self.floor < 0 or self.cap < self.floor or self.slope < 0:
            raise ValueError("invalid reserve policy")

    def multiplier(self, cvr: float) -> float:
        return self.floor + (self.cap - self.floor) * (1.0 - math.exp(-self.slope * cvr))


def personalized_reserve(policy: ReservePolicy, advertiser: str, calibrated_cvr: float) -> float:
    """Reserve for one buyer; depends on its calibrated CVR only, not on its id."""
    if not 0.0 <= calibrated_cvr <= 1.0:
        raise ValueError("calibrated_cvr must be in [0, 1]")
    return policy.base * policy.multiplier(calibrated_cvr)


@dataclass(frozen=True)
class BankAccount:
    """Per-buyer running surplus (value delivered minus payments).

    A high balance tightens that buyer's next reserves, a low one loosens
    them, through ``reserve_multiplier``.
    """

    balance: float = 0.0
    sensitivity: float = 0.2
    scale: float = 50.0
    bounds: tuple[float, float] = (0.8, 1.25)

    def reserve_multiplier(self) -> float:
        m = 1.0 + self.sensitivity * math.tanh(self.balance / self.scale)
        return min(max(m, self.bounds[0]), self.bounds[1])


def account_update(account: BankAccount, value: float = 0.0, payment: float = 0.0) -> BankAccount:
    """balance += value - payment, where value = calibrated cvr * target CPA per click."""
    return BankAccount(account.balance + value - payment, account.sensitivity, account.scale, account.bounds)


class AccountBook:
    """Bank accounts for all buyers, keyed by advertiser id."""

    def __init__(self, template: Optional[BankAccount] = None):
        self.template = template or BankAccount()
        self.accounts: dict[str, BankAccount] = {}

    def get(self, advertiser: str) -> BankAccount:
        return self.accounts.get(advertiser, self.template)

    def apply(self, advertiser: str, value: float, payment: float) -> None:
        self.accounts[advertiser] = account_update(self.get(advertiser), value, payment)

    def balances(self, advertisers: Sequence[str]) -> list[float]:
        return [self.get(a).balance for a in advertisers]


@dataclass(frozen=True)
class Placement:
    position: int
    entry: AuctionEntry
    score: float
    cpc_micros: int
    reserve_micros: int

    @property
    def cpc(self) -> float:
        return self.cpc_micros / MICROS


@dataclass(frozen=True)
class AuctionOutcome:
    query_id: str
    winners: tuple[Placement, ...]
    losers: tuple[AuctionEntry, ...]
    excluded: tuple[AuctionEntry, ...]
    reserves: dict = field(default_factory=dict)  # advertiser -> reserve micros

    def check(self) -> None:
        for w in self.winners:
            if not w.reserve_micros <= w.cpc_micros <= w.entry.bid_micros:
                raise AssertionError(f"price sandwich violated for {w.entry.advertiser}")


def reserve_micros(policy: ReservePolicy, entry: AuctionEntry, accounts: Optional[AccountBook]) -> int:
    r = personalized_reserve(policy, entry.advertiser, entry.pcvr)
    if accounts is not None:
        r *= accounts.get(entry.advertiser).reserve_multiplier()
    return int(math.ceil(r * MICROS - 1e-6))


def rank_and_price(bid_micros: np.ndarray, pctr: np.ndarray, reserve: np.ndarray, tiebreak: np.ndarray,
                   slots: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Core next-price rule on arrays.

    Returns (eligible entries in rank order, winner indices, winner CPCs in
    micros). Entries with a bid under their reserve, a zero bid or a zero
    pctr are not eligible. Ties in bid * pctr go to the smaller ``tiebreak``.
    """
    bid = np.asarray(bid_micros, dtype=np.int64)
    pctr = np.asarray(pctr, dtype=float)
    reserve = np.asarray(reserve, dtype=np.int64)
    idx = np.flatnonzero((bid >= reserve) & (bid > 0) & (pctr > 0))
    score = bid[idx] * pctr[idx]
    order = idx[np.lexsort((np.asarray(tiebreak)[idx], -score))]
    winners = order[:slots]
    cpc = np.empty(len(winners), dtype=np.int64)
    for j, i in enumerate(winners):
        if j + 1 < len(order):
            n = order[j + 1]
            price = int(math.ceil(bid[n] * pctr[n] / pctr[i] - 1e-6))
        else:
            price = 0
        cpc[j] = min(max(price, int(reserve[i])), int(bid[i]))
    return order, winners, cpc


def run_auction(req: AuctionRequest, policy: ReservePolicy, accounts: Optional[AccountBook] = None) -> AuctionOutcome:
    """Rank by bid * pctr and charge each winner the next-price CPC.

    Entries bidding below their personalized reserve are dropped first. The
    winner in slot j pays max(score of the next eligible entry / own pctr,
    own reserve); the lowest eligible entry pays its reserve.
    """
    entries = list(req.entries)
    if not entries:
        return AuctionOutcome(req.query_id, (), (), (), {})
    reserves = [reserve_micros(policy, e, accounts) for e in entries]
    keys = sorted(range(len(entries)), key=lambda i: (entries[i].advertiser, entries[i].ad_id))
    tiebreak = np.empty(len(entries), dtype=np.int64)
    tiebreak[keys] = np.arange(len(entries))
    order, winners, cpc = rank_and_price(
        np.array([e.bid_micros for e in entries]), np.array([e.pctr for e in entries]),
        np.array(reserves), tiebreak, req.slots)
    placed = tuple(
        Placement(j, entries[i], entries[i].bid_micros * entries[i].pctr / MICROS, int(cpc[j]), reserves[i])
        for j, i in enumerate(winners))
    losers = tuple(entries[i] for i in order[req.slots:])
    eligible = set(order.tolist())
    excluded = tuple(e for i, e in enumerate(entries) if i not in eligible)
    return AuctionOutcome(req.query_id, placed, losers, excluded,
                          {e.advertiser: r for e, r in zip(entries, reserves)})


def outcome_row(auction_id: int, outcome: AuctionOutcome, accounts: Optional[AccountBook]) -> list:
    """Flatten an outcome into a CSV row for the auction log."""
    adv = [w.entry.advertiser for w in outcome.winners]
    bal = accounts.balances(adv) if accounts is not None else [0.0] * len(adv)
    return [
        auction_id,
        outcome.query_id,
        len(outcome.winners) + len(outcome.losers) + len(outcome.excluded),
        ";".join(adv),
        ";".join(f"{w.score:.9g}" for w in outcome.winners),
        ";".join(str(w.entry.bid_micros) for w in outcome.winners),
        ";".join(str(w.cpc_micros) for w in outcome.winners),
        ";".join(str(w.reserve_micros) for w in outcome.winners),
        ";".join(f"{b:.6f}" for b in bal),
    ]


AUCTION_LOG_FIELDS = ("auction", "query", "n_entries", "winners", "scores", "bids", "cpc", "reserves", "balances")


def gsp_prices(bids: np.ndarray, pctr: np.ndarray, slots: int) -> np.ndarray:
    """Reference next-price CPCs with zero reserves, for tests."""
    order = np.lexsort((np.arange(len(bids)), -bids * pctr))
    out = np.zeros(min(slots, len(bids)))
    for j in range(len(out)):
        i = order[j]
        out[j] = bids[order[j + 1]] * pctr[order[j + 1]] / pctr[i] if j + 1 < len(order) else 0.0
    return out
