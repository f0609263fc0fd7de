import math

import numpy as np
import pytest

from adsmarket.config import MarketConfig
from adsmarket.market import (Ad, ContractError, GroundTruth, MarketSpec, Query, SimLedger, generate_market,
                              platform_revenue, sample_click, sample_conversion, to_micros)


class ConstantTruth:
    def __init__(self, p):
        self.p = p

    def ctr(self, query, ad, fmt=None):
        return self.p

    def cvr(self, query, ad, ctype):
        return self.p


QUERY = Query("q", ("a", "b"), 0, 0)
AD = Ad("x-a0", "x", ("a",), ("c",))


@pytest.fixture(scope="module")
def small_market():
    return generate_market(42, 10, 500, MarketConfig(n_queries=300))


def test_generate_is_deterministic(small_market):
    again = generate_market(42, 10, 500, MarketConfig(n_queries=300))
    assert small_market.to_text() == again.to_text()


def test_generate_rejects_degenerate_sizes():
    with pytest.raises(ValueError):
        generate_market(1, 0, 500)
    with pytest.raises(ValueError):
        generate_market(1, 5, 0)


def test_generate_full_scale_advertiser_count():
    m = generate_market(3, 670, 600, MarketConfig(n_queries=200))
    assert len(m.advertisers) == 670


def test_every_target_respects_roi_cap(small_market):
    for adv in small_market.advertisers:
        cap = adv.sale_value * adv.sale_rate / (1.0 + adv.roi_floor)
        assert adv.target_cpa <= cap + 1e-12


def test_queries_and_keywords_share_vocabulary(small_market):
    vocab = set(small_market.vocab)
    for q in small_market.queries:
        assert set(q.text) <= vocab
    for adv in small_market.advertisers:
        for k in adv.keywords:
            assert set(k.text) <= vocab


def test_market_text_round_trip(small_market, tmp_path):
    path = tmp_path / "market.jsonl"
    small_market.save(path)
    back = MarketSpec.load(path)
    assert back.to_text() == small_market.to_text()
    q = back.make_query(3, 1, 2)
    ad = back.ads[0]
    assert back.ground_truth.ctr(q, ad) == small_market.ground_truth.ctr(q, ad)


def test_traffic_mix_normalized(small_market):
    assert abs(small_market.ground_truth.traffic_mix.sum() - 1.0) < 1e-12


def test_ground_truth_probabilities_in_unit_interval(small_market):
    gt = small_market.ground_truth
    for pi in range(0, 300, 17):
        for ad in small_market.ads[::3]:
            q = small_market.make_query(pi, pi % 3, pi % 8)
            for p in (gt.ctr(q, ad), gt.cvr(q, ad, "purchase"), gt.relevance(q, ad)):
                assert 0.0 <= p <= 1.0


def test_query_bucket_range():
    with pytest.raises(ValueError):
        Query("q", ("a",), 0, 8)


@pytest.mark.parametrize("p,expected", [(0.0, False), (1.0, True)])
def test_sample_click_degenerate(p, expected):
    rng = np.random.default_rng(0)
    assert all(sample_click(ConstantTruth(p), QUERY, AD, None, rng) == expected for _ in range(200))


def test_sample_click_rate():
    rng = np.random.default_rng(1)
    hits = sum(sample_click(ConstantTruth(0.3), QUERY, AD, None, rng) for _ in range(100_000))
    assert abs(hits / 100_000 - 0.3) < 0.01


def test_sample_click_reproducible():
    a = [sample_click(ConstantTruth(0.5), QUERY, AD, None, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_click(ConstantTruth(0.5), QUERY, AD, None, np.random.default_rng(5)) for _ in range(3)]
    assert a == b


@pytest.mark.parametrize("p,expected", [(0.0, False), (1.0, True)])
def test_sample_conversion_degenerate(p, expected):
    rng = np.random.default_rng(0)
    assert all(sample_conversion(ConstantTruth(p), QUERY, AD, "purchase", rng, True) == expected
               for _ in range(200))


def test_sample_conversion_rate():
    rng = np.random.default_rng(2)
    hits = sum(sample_conversion(ConstantTruth(0.3), QUERY, AD, "purchase", rng, True) for _ in range(100_000))
    assert abs(hits / 100_000 - 0.3) < 0.01


def test_conversion_requires_click():
    with pytest.raises(ContractError):
        sample_conversion(ConstantTruth(0.5), QUERY, AD, "purchase", np.random.default_rng(0), False)


def test_revenue_empty_ledger():
    assert platform_revenue(SimLedger([], [])) == 0.0
    led = SimLedger(["a"], [to_micros(10)])
    assert platform_revenue(led) == 0.0


def test_revenue_single_advertiser():
    led = SimLedger(["a"], [to_micros(100)])
    for _ in range(10):
        led.record_impression(0)
        led.record_click(0, to_micros(2.0))
    assert platform_revenue(led) == pytest.approx(20.0, rel=1e-12)


def test_revenue_click_and_conversion_forms_agree():
    rng = np.random.default_rng(3)
    n = 25
    led = SimLedger([f"a{i}" for i in range(n)], [to_micros(1000)] * n)
    for _ in range(5000):
        i = int(rng.integers(n))
        led.record_impression(i)
        if rng.random() < 0.4 and led.remaining()[i] > to_micros(3):
            led.record_click(i, int(rng.integers(1, to_micros(3))))
            if rng.random() < 0.3:
                led.record_conversion(i)
    click_form = platform_revenue(led, "click")
    conv_form = platform_revenue(led, "conversion")
    direct = led.cost.sum() / 1e6
    assert math.isclose(click_form, conv_form, rel_tol=1e-9)
    assert math.isclose(click_form, direct, rel_tol=1e-9)


def test_ledger_ratios_and_guards():
    led = SimLedger(["a", "b"], [to_micros(5), to_micros(5)])
    led.record_impression(0)
    led.record_impression(0)
    led.record_click(0, to_micros(1.5))
    led.record_conversion(0)
    assert led.ctr()[0] == 0.5 and led.cvr()[0] == 1.0 and led.cpa()[0] == 1.5
    assert np.isnan(led.ctr()[1])
    with pytest.raises(ContractError):
        led.record_conversion(0)
    with pytest.raises(ContractError):
        led.record_click(0, to_micros(4.0))
    led.check()


def test_overlap_and_relevance_bounds():
    gt_overlap = GroundTruth.overlap(("a", "b", "z"), Ad("x-a0", "x", ("a",), ("b",)))
    assert gt_overlap == pytest.approx(2 / 3)
    assert GroundTruth.overlap((), AD) == 0.0
