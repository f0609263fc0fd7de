import json

import numpy as np
import pytest

from adsmarket.cli import build_parser, main
from adsmarket.config import save_config
from adsmarket.market import MarketSpec

from conftest import small_config


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    save_config(small_config(sim={"days": 2, "warmup_days": 1, "queries_per_day": 1000}), path)
    return str(path)


def _run(cfg_file, run_dir, *args):
    return main(list(args) + ["--config", cfg_file, "--run-dir", str(run_dir)])


def _manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())


def test_every_subcommand_takes_config_and_seed():
    p = build_parser()
    for argv in (["generate"], ["build-graph"], ["train", "alpha"], ["simulate"], ["ab-test"],
                 ["target", "--query", "x"], ["report"]):
        args = p.parse_args(argv + ["--config", "c.json", "--seed", "3"])
        assert args.config == "c.json" and args.seed == 3
    with pytest.raises(SystemExit):
        p.parse_args(["train", "nothing"])


def test_generate_writes_market_and_manifest(cfg_file, tmp_path):
    assert _run(cfg_file, tmp_path, "generate", "--seed", "4") == 0
    m = _manifest(tmp_path)
    assert m["seed"] == 4 and len(m["config_digest"]) == 16
    assert {"numpy", "scipy", "python", "adsmarket"} <= set(m["versions"])
    assert "market.json" in m["steps"]["generate"]
    assert len(MarketSpec.load(tmp_path / "market.json").advertisers) == 40


def test_manifest_accumulates_steps_and_resets_on_new_config(cfg_file, tmp_path):
    _run(cfg_file, tmp_path, "generate")
    _run(cfg_file, tmp_path, "train", "alpha")
    assert set(_manifest(tmp_path)["steps"]) == {"generate", "train alpha"}
    _run(cfg_file, tmp_path, "train", "alpha", "--seed", "99")
    assert set(_manifest(tmp_path)["steps"]) == {"train alpha"}


def test_simulate_is_reproducible_and_uses_generated_market(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _run(cfg_file, a, "generate")
    _run(cfg_file, a, "simulate")
    _run(cfg_file, b, "simulate")
    for name in ("auction_log.csv", "report.json", "bid_log.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_report_checks_log_against_report(cfg_file, tmp_path, capsys):
    with pytest.raises(SystemExit):
        _run(cfg_file, tmp_path, "report")
    _run(cfg_file, tmp_path, "simulate")
    _run(cfg_file, tmp_path, "report")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["log_consistent"] is True
    assert "conversions" in capsys.readouterr().out


def test_target_returns_json_candidates(cfg_file, tmp_path, capsys):
    _run(cfg_file, tmp_path, "generate")
    q = " ".join(MarketSpec.load(tmp_path / "market.json").queries[3].text)
    _run(cfg_file, tmp_path, "target", "--query", q)
    out = json.loads((tmp_path / "target.json").read_text())
    assert out["known_query"] and out["candidates"]
    assert all(0.0 <= c["relevance"] <= 1.0 for c in out["candidates"])
    assert len({c["ad"] for c in out["candidates"]}) == len(out["candidates"])
    printed = capsys.readouterr().out
    assert json.loads(printed[printed.index("{"):]) == out


def test_build_graph_and_training_outputs(cfg_file, tmp_path):
    _run(cfg_file, tmp_path, "build-graph")
    for name in ("graph.tsv", "pathsim_index.json", "documents.jsonl"):
        assert (tmp_path / name).stat().st_size > 0
    _run(cfg_file, tmp_path, "train", "response")
    assert (tmp_path / "response_loss.csv").read_text().startswith("epoch,task,loss")
    _run(cfg_file, tmp_path, "train", "tower")
    with np.load(tmp_path / "tower.npz") as z:
        assert z["Pq"].shape == z["Pa"].shape
    _run(cfg_file, tmp_path, "train", "aggregator")
    hist = json.loads((tmp_path / "aggregator_history.json").read_text())
    assert hist["loss"][-1] < hist["loss"][0]
    _run(cfg_file, tmp_path, "train", "alpha")
    assert 0.0 <= json.loads((tmp_path / "alpha_eval.json").read_text())["optimal_agreement"] <= 1.0


def test_ab_test_writes_per_seed_deltas(cfg_file, tmp_path):
    _run(cfg_file, tmp_path, "ab-test", "--replications", "3")
    rows = (tmp_path / "ab_deltas.csv").read_text().splitlines()
    assert rows[0].startswith("seed,") and len(rows) == 4
    summary = json.loads((tmp_path / "ab_summary.json").read_text())
    assert summary["seeds"] == [11, 12, 13]
    assert summary["deltas"]["conversions"]["n"] == 3
