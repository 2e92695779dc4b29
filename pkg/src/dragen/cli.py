"""Command-line driver: ``dragen {gen-data,train,eval,compare,advgen,verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dragen import SCHEMA_VERSION, __version__, config as config_mod
from dragen import nn
from dragen.advgen import AscentConfig, generate_adversarial
from dragen.embed import EmbedParams
from dragen.envs import ConfigError, Dataset, config_hash
from dragen.grasp import H_THR
from dragen.config import METHODS
from dragen.loop import ManifestMismatch, compare, data_hash, evaluate, make_datasets, run
from dragen.policy import Policy
from dragen import verify as verify_mod

log = logging.getLogger("dragen")


class UsageError(Exception):
    pass


def _config(args, **overrides):
    user = config_mod.load(args.config) if getattr(args, "config", None) else {}
    return config_mod.resolve(user, getattr(args, "preset", None), **overrides)


def cmd_gen_data(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    train, test = make_datasets(cfg)
    out = Path(args.out)
    meta = {"config_hash": config_hash(cfg), "data_hash": data_hash(cfg)}
    train.save(out / "train", {**meta, "split": "train"})
    test.save(out / "test", {**meta, "split": "test"})
    print(f"wrote {len(train)} train and {len(test)} test environments to {out}")
    return 0


def _load_data(path):
    if path is None:
        return None, None
    d = Path(path)
    return Dataset.load(d / "train"), Dataset.load(d / "test")


def cmd_train(args):
    cfg = _config(args, method=args.method, seed=args.seed, iterations=args.iterations, workers=args.workers)
    train_set, test_set = _load_data(args.data)

    def progress(row):
        cells = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
        log.info(cells)

    res = run(cfg, args.out, train_set, test_set, progress)
    print(json.dumps({"method": cfg["run"]["method"], "seed": cfg["run"]["seed"], "set_size": len(res.dataset),
                      "test_success": {str(k): v for k, v in res.test_success.items()}}))
    return 0


def _checkpoint(run_dir, kind, iteration):
    ckpts = sorted((Path(run_dir) / "checkpoints").glob(f"iter-*-{kind}.json"))
    if not ckpts:
        raise UsageError(f"no {kind} checkpoints in {run_dir}")
    if iteration is None:
        return ckpts[-1].with_suffix("")
    path = Path(run_dir) / "checkpoints" / f"iter-{iteration:03d}-{kind}"
    if not path.with_suffix(".json").exists():
        raise UsageError(f"no {kind} checkpoint for iteration {iteration}")
    return path


def cmd_eval(args):
    nets, extra = nn.load_checkpoint(_checkpoint(args.run, "policy", args.iteration))
    policy = Policy(nets["scorer"])
    data = Dataset.load(args.data or Path(args.run) / "datasets" / "test")
    rates = evaluate(policy, data.heightmaps, args.frictions, args.workers)
    print(json.dumps({"iteration": extra.get("iteration"), "n": len(data),
                      "success": {str(k): v for k, v in rates.items()}}))
    return 0


def cmd_compare(args):
    csv_text, table = compare(args.runs)
    if args.out:
        Path(args.out).write_text(csv_text)
    print(table, end="")
    return 0


def cmd_advgen(args):
    run_cfg = json.loads((Path(args.run) / "config.json").read_text())
    nets, _ = nn.load_checkpoint(_checkpoint(args.run, "embed", args.iteration))
    params = EmbedParams(nets["encoder"], nets["decoder"], nets["predictor"])
    S = Dataset.load(Path(args.run) / "datasets" / "S_final")
    ac = run_cfg["ascent"]
    cfg = AscentConfig(ac["eta"], ac["lam"] if args.lam is None else args.lam, ac["max_steps"],
                       ac["target_frac"], penalty=ac["penalty"])
    maps, recs, target = generate_adversarial(S.heightmaps, params, args.K, cfg, np.random.default_rng(args.seed))
    chash = run_cfg.get("_config_hash", "")
    # (original, perturbed) pairs share an index across the two datasets
    originals = Dataset.empty(S.G)
    originals.add(S.heightmaps[[r.source for r in recs]], "advgen-source", [args.seed] * len(recs))
    originals.save(Path(args.out) / "originals", {"config_hash": chash})
    out = Dataset.empty(S.G)
    if ac.get("extrude", False):
        maps = (maps >= H_THR).astype(np.float64)
    out.add(maps, "advgen", [args.seed] * len(maps))
    out.save(Path(args.out) / "generated", {"config_hash": chash, "target": target})
    with open(Path(args.out) / "perturbations.jsonl", "w") as fh:
        for r in recs:
            fh.write(json.dumps({**r.to_json(), "source_id": S.entries[r.source]["id"], "target": target,
                                 "config_hash": chash,
                                 "tool_version": __version__}, sort_keys=True) + "\n")
    reached = float(np.mean([r.target_reached for r in recs])) if recs else 0.0
    print(json.dumps({"generated": len(maps), "target": target, "reached_fraction": reached}))
    return 0


def cmd_verify(args):
    report = verify_mod.run_suite(args.suite, args.seed)
    report["tool_version"] = __version__
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if report["passed"] else 1


def build_parser():
    p = argparse.ArgumentParser(prog="dragen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"dragen {__version__} (config schema {SCHEMA_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialise the train and test environment sets")
    g.add_argument("--config")
    g.add_argument("--preset", choices=sorted(config_mod.PRESETS))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the alternating loop for one method and seed")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(config_mod.PRESETS))
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--data", help="directory written by gen-data (default: sample from the config)")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="greedy success of a saved policy")
    e.add_argument("--run", required=True)
    e.add_argument("--iteration", type=int)
    e.add_argument("--data", help="dataset path stem (default: the run's test set)")
    e.add_argument("--frictions", type=float, nargs="+", default=[0.3, 0.4, 0.5])
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="tabulate final test success across runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", help="write the table as CSV")
    c.set_defaults(fn=cmd_compare)

    a = sub.add_parser("advgen", help="generate adversarial environments from a run's embedding")
    a.add_argument("--run", required=True)
    a.add_argument("--iteration", type=int)
    a.add_argument("--K", type=int, default=96)
    a.add_argument("--lam", type=float)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_advgen)

    v = sub.add_parser("verify", help="run a self-contained verification suite")
    v.add_argument("--suite", required=True, choices=verify_mod.SUITES)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="also write the JSON report here")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ManifestMismatch, UsageError, nn.ConfigurationError, FileNotFoundError) as exc:
        print(f"dragen {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
