"""Command-line entry point: ``adsmarket <command> --config cfg.json --seed N --run-dir DIR``.

Every command writes its outputs under the run directory together with a
``manifest.json`` recording the command, config digest and library versions.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .bidding.alpha import CpaTrackingMDP, optimal_agreement, train_on_mdp, value_iteration
from .bidding.strategy import write_bid_log
from .config import Config, load_config, save_config
from .embed import save_embeddings, train_aggregator, train_graph_embeddings
from .hetnet import query_ad_index, save_index
from .market import MarketSpec, generate_market
from .response import write_loss_log
from .retrieval import build_documents, save_documents, target
from .sim import (build_world, history_graph, make_report, manual_match_table, metrics_from_log, pretrain_terms,
                  run_history, simulate, write_auction_log)

log = logging.getLogger("adsmarket")

MARKET_FILE = "market.json"


# ---------------------------------------------------------------------------
# run directory helpers


class Run:
    def __init__(self, args: argparse.Namespace, cfg: Config):
        self.dir = Path(args.run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.cfg = cfg
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")

    def finish(self) -> None:
        """Record this command in the manifest; steps from other configs are dropped."""
        save_config(self.cfg, self.path("config.json"))
        path = self.dir / "manifest.json"
        manifest = json.loads(path.read_text()) if path.exists() else {}
        if manifest.get("config_digest") != self.cfg.digest():
            manifest = {"steps": {}}
        what = getattr(self.args, "what", None)
        manifest["steps"][f"{self.args.command} {what}" if what else self.args.command] = sorted(set(self.outputs))
        manifest.update({
            "seed": self.cfg.seed,
            "config_digest": self.cfg.digest(),
            "versions": {"adsmarket": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        })
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _plain(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def _market(run: Run) -> MarketSpec:
    """The run directory's market if ``generate`` wrote one for this config, else a fresh one."""
    path = run.dir / MARKET_FILE
    manifest = run.dir / "manifest.json"
    if path.exists() and manifest.exists():
        m = json.loads(manifest.read_text())
        if m.get("config_digest") == run.cfg.digest() and "generate" in m.get("steps", {}):
            return MarketSpec.load(path)
    mc = run.cfg.market
    return generate_market(run.cfg.seed, mc.n_advertisers, mc.vocab_size, mc)


def _node_terms(g, market: MarketSpec) -> dict:
    keywords = {k.id: k.text for adv in market.advertisers for k in adv.keywords}
    by_query = {q.id: q.text for q in market.queries}
    lookup = {
        "query": lambda i: list(by_query.get(i, ())),
        "ad": lambda i: list(market.ads[market.ad_index[i]].creative_text)
        + list(market.ads[market.ad_index[i]].landing_terms),
        "keyword": lambda i: list(keywords.get(i, ())),
        "advertiser": lambda i: [],
    }
    return {t: [lookup[t](i) for i in ids] for t, ids in g.nodes.items()}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(run: Run) -> None:
    mc = run.cfg.market
    market = generate_market(run.cfg.seed, mc.n_advertisers, mc.vocab_size, mc)
    market.save(run.path(MARKET_FILE))
    print(f"market: {len(market.advertisers)} advertisers, {len(market.ads)} ads, {len(market.queries)} queries")


def cmd_build_graph(run: Run) -> None:
    cfg = run.cfg
    market = _market(run)
    hist = run_history(market, cfg, manual_match_table(market, range(len(market.advertisers))))
    g = history_graph(market, hist, cfg.graph.min_support)
    g.save(run.path("graph.tsv"))
    index = query_ad_index(g, cfg.graph.pathsim_path, cfg.graph.pathsim_k, cfg.graph.pathsim_neighbor_queries)
    save_index(index, run.path("pathsim_index.json"))
    qdocs, adocs = build_documents(hist["click_events"], hist["cooccur"], market, cfg.retrieval.doc_min_support)
    save_documents(qdocs, adocs, run.path("documents.jsonl"))
    counts = {t: len(ids) for t, ids in g.nodes.items()}
    run.write_json("graph_stats.json", {"nodes": counts, "click_edges": g.n_edges("clicks")})
    print(f"graph: {counts}, {g.n_edges('clicks')} click edges")


def cmd_train(run: Run) -> None:
    what = run.args.what
    cfg = run.cfg
    if what == "alpha":
        _train_alpha(run)
        return
    world = build_world(cfg, _market(run))
    if what == "response":
        world.model.save(run.path("response_model.npz"))
        write_loss_log(world.model, run.path("response_loss.csv"))
        run.write_json("response_eval.json", world.history_stats)
    elif what == "skipgram":
        table = train_graph_embeddings(world.graph, cfg.graph.walk_paths, cfg.embed,
                                       np.random.default_rng([cfg.seed, 7]))
        rows = [(*table.names[i], table.vectors[i]) for i in range(len(table.names))]
        save_embeddings(run.path("node_embeddings.txt"), rows)
        run.write_json("skipgram_history.json", {"objective": table.history})
    elif what == "aggregator":
        _train_aggregator(run, world)
    elif what == "tower":
        tower = world.services.tower if world.services is not None else None
        if tower is None:
            raise SystemExit("no automated advertisers; nothing to train the tower on")
        with open(run.path("tower.npz"), "wb") as fh:
            np.savez(fh, terms=tower.terms, Pq=tower.Pq, Pa=tower.Pa, temperature=tower.temperature,
                     vocab=np.array(sorted(tower.vocab, key=tower.vocab.get)))
        run.write_json("tower_history.json", {"loss": tower.history})
    print(f"trained {what}")


def _train_alpha(run: Run) -> None:
    cfg = run.cfg
    rng = np.random.default_rng([cfg.seed, 8])
    drift = tuple(float(x) for x in rng.uniform(-0.2, 0.2, 8))
    mdp = CpaTrackingMDP(drift=drift, discount=cfg.bid.alpha_discount)
    learned = train_on_mdp(mdp, cfg.bid.alpha_pretrain_episodes, rng)
    agreement = optimal_agreement(learned, value_iteration(mdp))
    np.save(run.path("alpha_q.npy"), learned)
    run.write_json("alpha_eval.json", {"episodes": cfg.bid.alpha_pretrain_episodes, "drift": drift,
                                       "optimal_agreement": agreement})
    print(f"alpha: optimal-action agreement {agreement:.3f}")


def _train_aggregator(run: Run, world) -> None:
    cfg = run.cfg
    market, g = world.market, world.graph
    rng = np.random.default_rng([cfg.seed, 9])
    qdocs, adocs = build_documents(world.click_events, {}, market, cfg.retrieval.doc_min_support)
    vocab, term_vectors = pretrain_terms(market, qdocs, adocs, cfg, rng)
    positives = sorted({(market.queries[ev.query].id, ev.ad_id) for ev in world.click_events})
    if not positives:
        raise SystemExit("history has no clicks; nothing to train the aggregator on")
    seen = set(positives)
    queries, ads = g.nodes["query"], g.nodes["ad"]
    negatives: list = []
    while len(negatives) < len(positives):
        pair = (queries[int(rng.integers(len(queries)))], ads[int(rng.integers(len(ads)))])
        if pair not in seen:
            negatives.append(pair)
            seen.add(pair)
    ec = cfg.embed
    model = train_aggregator(g, term_vectors, vocab, _node_terms(g, market), positives, negatives,
                             cfg.graph.meta_paths, ec.aggregator_epochs, rng, ec.aggregator_hidden,
                             ec.aggregator_lr, ec.batch_size)
    with open(run.path("aggregator.npz"), "wb") as fh:
        np.savez(fh, **{k.replace(".", "_"): v for k, v in model.params.items()})
    run.write_json("aggregator_history.json", {"loss": model.history, "positives": len(positives),
                                               "negatives": len(negatives)})


def cmd_simulate(run: Run) -> None:
    res = simulate(run.cfg, build_world(run.cfg, _market(run)))
    with open(run.path("auction_log.csv"), "w", newline="") as fh:
        write_auction_log(res, fh)
    write_bid_log(run.path("bid_log.csv"), res.bid_rows)
    report = make_report(res)
    run.path("report.json").write_text(report.to_json())
    _print_report(json.loads(report.to_json()))


def cmd_ab_test(run: Run) -> None:
    base = run.cfg
    seeds = [base.seed + i for i in range(run.args.replications)]
    rows = []
    for s in seeds:
        report = json.loads(make_report(simulate(base.replace(seed=s))).to_json())
        rows.append({"seed": s, **{k: v["abs"] for k, v in report["deltas"].items()}})
        log.info("seed %d done", s)
    metrics = ["conversions", "cpa", "relevance", "revenue", "clicks"]
    with open(run.path("ab_deltas.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed"] + metrics)
        for r in rows:
            w.writerow([r["seed"]] + [repr(float(r[m])) for m in metrics])
    summary = {}
    for m in metrics:
        d = np.array([r[m] for r in rows], dtype=float)
        d = d[np.isfinite(d)]
        entry = {"mean": float(d.mean()) if len(d) else float("nan"), "n": int(len(d))}
        if len(d) > 1 and np.ptp(d) > 0:
            entry["p_greater"] = float(stats.ttest_1samp(d, 0.0, alternative="greater").pvalue)
            entry["p_less"] = float(stats.ttest_1samp(d, 0.0, alternative="less").pvalue)
        summary[m] = entry
    run.write_json("ab_summary.json", {"seeds": seeds, "deltas": summary})
    for m, e in summary.items():
        ps = "  ".join(f"{k}={e[k]:.4f}" for k in ("p_greater", "p_less") if k in e)
        print(f"{m:12s} mean delta {e['mean']:+.6g}  {ps}")


def cmd_target(run: Run) -> None:
    world = build_world(run.cfg, _market(run))
    if world.services is None:
        raise SystemExit("no automated advertisers to target")
    text = tuple(run.args.query.lower().split())
    match = [i for i, q in enumerate(world.market.queries) if q.text == text]
    query = world.market.make_query(match[0], 0, 0) if match else text
    rc = run.cfg.retrieval
    cands = target(query, world.services, rc.k_each, rc.relevance_floor)
    out = {"query": " ".join(text), "known_query": bool(match),
           "candidates": [{"ad": c.ad_id, "source": c.source, "score": c.raw_score, "relevance": c.relevance}
                          for c in cands]}
    run.write_json("target.json", out)
    print(json.dumps(out, indent=2))


def cmd_report(run: Run) -> None:
    path = run.dir / "report.json"
    if not path.exists():
        raise SystemExit(f"{path} not found; run `simulate` first")
    report = json.loads(path.read_text())
    log_path = run.dir / "auction_log.csv"
    if log_path.exists():
        recount = metrics_from_log(log_path.read_text(), run.cfg.sim.warmup_days)
        consistent = all(recount[a]["conversions"] == report["arms"][a]["conversions"] for a in recount)
        report["log_consistent"] = consistent
    run.write_json("summary.json", report)
    _print_report(report)


def _print_report(report: dict) -> None:
    print(f"{'metric':12s} {'manual':>14s} {'auto':>14s} {'delta':>12s}")
    for k, d in report["deltas"].items():
        m, a = report["arms"]["manual"][k], report["arms"]["auto"][k]
        print(f"{k:12s} {m:14.6g} {a:14.6g} {d['abs']:+12.6g}")
    print(f"cpa in band {report['cpa_in_band']:.3f}  pacing deviation {report['pacing_pp']:.2f}pp  "
          f"auctions {report['auctions']}")


COMMANDS = {
    "generate": cmd_generate,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "ab-test": cmd_ab_test,
    "target": cmd_target,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults built in)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--run-dir", default="runs/default", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adsmarket", description="Simulated sponsored-search market.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate a market")
    sub.add_parser("build-graph", parents=[common], help="build the history graph, PathSim index and documents")
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("what", choices=["response", "skipgram", "aggregator", "tower", "alpha"])
    sub.add_parser("simulate", parents=[common], help="run the A/B market simulation")
    ab = sub.add_parser("ab-test", parents=[common], help="replicate the simulation over seeds")
    ab.add_argument("--replications", type=int, default=10)
    tg = sub.add_parser("target", parents=[common], help="retrieve candidate ads for a query")
    tg.add_argument("--query", required=True)
    sub.add_parser("report", parents=[common], help="summarize a simulate run")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = load_config(args.config, args.seed)
    run = Run(args, cfg)
    COMMANDS[args.command](run)
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
