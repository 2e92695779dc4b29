"""The alternating minimax loop, its augmentation baselines, and evaluation.

One iteration of the ``dragen`` method:

1. label every environment in S with the current policy's friction-sweep cost,
2. train the embedding on (S, costs) and rebuild the latent distribution,
3. ascend K sampled latents, decode them and add them to S,
4. retrain the policy on S.

``dr`` and ``gaussian`` replace step 3 by K chained-primitive objects or K
noisy copies; ``none`` only retrains the policy.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dragen import __version__, config as config_mod
from dragen import nn
from dragen.advgen import AscentConfig, empty_after_threshold, generate_adversarial
from dragen.embed import (EmbedLossWeights, build_latent_distribution, decode, encode, init_embed,
                          predict_cost, predictor_lipschitz_bound, train_embedding)
from dragen.envs import (Dataset, DistributionConfig, config_hash, gaussian_augment,
                         generate_dr_object, sample_dataset)
from dragen.grasp import H_THR, SWEEP_FRICTIONS, _geometry, _holds, label_action
from dragen.policy import ExplorationSchedule, Policy, PolicyTrainer

log = logging.getLogger(__name__)

# stream ids for seed derivation
_POLICY_INIT, _POLICY_TRAIN, _EMBED_INIT, _EMBED_TRAIN, _GENERATE = range(5)

METRIC_COLUMNS = (
    "iteration", "set_size", "mean_true_cost", "max_true_cost", "mean_pred_cost",
    "recon_mse", "lip_bound", "target_reached_frac", "train_success",
)


def derive_rng(master_seed, *keys):
    """Generator for a (stream, iteration, ...) key, independent of call order."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _label_one(pair):
    h, action = pair
    return label_action(h, action).value


def _success_profile(args):
    h, action, frictions = args
    geom = _geometry(h, action)
    return [bool(_holds(geom, mu)) for mu in frictions]


def label_costs(policy: Policy, maps, workers=1):
    actions = policy.greedy_actions(maps)
    return np.array(_pmap(_label_one, list(zip(maps, actions)), workers))


def evaluate(policy: Policy, maps, frictions=(0.3, 0.4, 0.5), workers=1):
    """Greedy success rate at each friction value, as ``{mu: rate}``."""
    maps = np.asarray(maps)
    if len(maps) == 0:
        raise ValueError("empty evaluation set")
    actions = policy.greedy_actions(maps)
    profiles = np.array(_pmap(_success_profile, [(h, a, tuple(frictions)) for h, a in zip(maps, actions)], workers))
    return {float(mu): float(rate) for mu, rate in zip(frictions, profiles.mean(axis=0))}


def make_datasets(cfg):
    data = cfg["data"]
    G = cfg["grid_size"]
    train = sample_dataset(DistributionConfig.from_dict(data["train"]), data["n_train"], [data["seed"], 0], G)
    test = sample_dataset(DistributionConfig.from_dict(data["test"]), data["n_test"], [data["seed"], 1], G)
    return train, test


def run_hash(cfg):
    """Config hash without the worker count, which must not change any output."""
    return config_hash({**cfg, "run": {k: v for k, v in cfg["run"].items() if k != "workers"}})


def data_hash(cfg):
    return config_hash({"data": cfg["data"], "grid_size": cfg["grid_size"]})


@dataclass
class RunResult:
    metrics: list
    policy: Policy
    dataset: Dataset
    records: list
    test_success: dict


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def metrics_csv(rows, frictions, chash):
    cols = list(METRIC_COLUMNS) + [f"test_success_{mu}" for mu in frictions] + ["config_hash", "tool_version"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in cols[:-2]] + [chash, __version__])
    return buf.getvalue()


def run(cfg, out_dir=None, train_set: Dataset = None, test_set: Dataset = None, progress=None):
    """Execute one configured run; writes artifacts to ``out_dir`` if given."""
    cfg = config_mod.validate(cfg)
    rc, pc, ec, ac = cfg["run"], cfg["policy"], cfg["embed"], cfg["ascent"]
    method, seed, K, workers = rc["method"], rc["seed"], rc["K"], rc["workers"]
    frictions = cfg["eval"]["frictions"]
    chash = run_hash(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config_mod.dump({**cfg, "_config_hash": chash, "_tool_version": __version__}))

    if train_set is None or test_set is None:
        train_set, test_set = make_datasets(cfg)
    S = Dataset(train_set.heightmaps.copy(), [dict(e) for e in train_set.entries])
    S0 = train_set.heightmaps
    G = S.G

    policy = Policy.init(derive_rng(seed, _POLICY_INIT))
    trainer = PolicyTrainer(policy, pc["lr"], pc["batch_size"], pc["replay_ratio"], pc["replay_capacity"])

    def improve(t, steps):
        sched = ExplorationSchedule(pc["eps_start"], pc["eps_end"], steps)
        trainer.train(S.heightmaps, steps, derive_rng(seed, _POLICY_TRAIN, t), sched)

    improve(0, pc["pretrain_steps"])
    weights = EmbedLossWeights(ec["alpha_pred"], ec["alpha_lip"], ec["alpha_norm"], ec["lip_target"])
    ascent = AscentConfig(ac["eta"], ac["lam"], ac["max_steps"], ac["target_frac"], penalty=ac["penalty"])
    embed = embed_opt = None
    rows, all_records = [], []

    def record(t, extra):
        row = {"iteration": t, "set_size": len(S),
               "train_success": evaluate(trainer.policy, S0, (0.3,), workers)[0.3]}
        row.update(extra)
        for mu, rate in evaluate(trainer.policy, test_set.heightmaps, frictions, workers).items():
            row[f"test_success_{mu}"] = rate
        rows.append(row)
        if out:
            nn.save_checkpoint(out / "checkpoints" / f"iter-{t:03d}-policy", {"scorer": trainer.policy.scorer},
                               {"config_hash": chash, "tool_version": __version__, "iteration": t})
            if embed is not None:
                nn.save_checkpoint(out / "checkpoints" / f"iter-{t:03d}-embed", embed.nets(),
                                   {"config_hash": chash, "tool_version": __version__, "iteration": t})
            (out / "metrics.csv").write_text(metrics_csv(rows, frictions, chash))
        if progress:
            progress(row)

    record(0, {})
    for t in range(1, rc["iterations"] + 1):
        extra = {}
        costs = label_costs(trainer.policy, S.heightmaps, workers)
        extra["mean_true_cost"] = float(costs.mean())
        extra["max_true_cost"] = float(costs.max())
        gen_rng = derive_rng(seed, _GENERATE, t)
        if method == "dragen":
            first = embed is None
            if first:
                embed = init_embed(G * G, derive_rng(seed, _EMBED_INIT), ec["latent_dim"], ec["hidden"],
                                   ec["predictor_hidden"])
            embed, embed_opt, _ = train_embedding(
                embed, S.heightmaps, costs, ec["first_epochs"] if first else ec["epochs"],
                derive_rng(seed, _EMBED_TRAIN, t), weights, ec["lr"], ec["batch_size"], ec["sn_iters"], embed_opt)
            z = build_latent_distribution(S.heightmaps, embed).atoms
            extra["mean_pred_cost"] = float(np.mean(predict_cost(embed, z)))
            extra["recon_mse"] = float(np.mean((decode(embed, z) - S.heightmaps) ** 2))
            extra["lip_bound"] = predictor_lipschitz_bound(embed)
            maps, recs, target = generate_adversarial(S.heightmaps, embed, K, ascent, gen_rng)
            extra["target_reached_frac"] = float(np.mean([r.target_reached for r in recs])) if recs else None
            flags = [["empty"] if empty_after_threshold(h) else None for h in maps]
            if ac["extrude"]:
                # the object is the decoded outline extruded to full height
                maps = (maps >= H_THR).astype(np.float64)
            start = len(S)
            S.add(maps, f"dragen-iter-{t}", [seed] * len(maps), flags)
            for i, r in enumerate(recs):
                d = r.to_json()
                d.update(iteration=t, env_id=S.entries[start + i]["id"], target=target,
                         source_id=S.entries[r.source]["id"])
                all_records.append(d)
        elif method == "dr":
            children = gen_rng.integers(2**63, size=K)
            maps = [generate_dr_object(np.random.default_rng(int(c)), G, DistributionConfig.from_dict(cfg["data"]["train"]))
                    for c in children]
            S.add(np.array(maps).reshape(K, G, G), "dr", children)
        elif method == "gaussian":
            src = gen_rng.integers(len(S), size=K)
            maps = [gaussian_augment(S.heightmaps[i], cfg["gaussian"]["sigma"], gen_rng) for i in src]
            S.add(np.array(maps).reshape(K, G, G), "gaussian", src)
        improve(t, pc["steps"])
        record(t, extra)

    test_success = rows[-1] and {mu: rows[-1][f"test_success_{mu}"] for mu in frictions}
    if out:
        S.save(out / "datasets" / "S_final", {"config_hash": chash})
        test_set.save(out / "datasets" / "test", {"data_hash": data_hash(cfg)})
        with open(out / "perturbations.jsonl", "w") as fh:
            for d in all_records:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        report = {
            "status": "complete", "method": method, "seed": seed, "config_hash": chash,
            "tool_version": __version__, "data_hash": data_hash(cfg), "set_size": len(S),
            "test_success": {str(mu): v for mu, v in test_success.items()},
            "train_success": rows[-1]["train_success"],
        }
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return RunResult(rows, trainer.policy, S, all_records, test_success)


# published success rates at the evaluated frictions, shown for orientation only
REFERENCE_SUCCESS = {
    "dragen": (0.655, 0.684, 0.716),
    "dr": (0.606, 0.632, 0.672),
    "none": (0.577, 0.627, 0.686),
}


class ManifestMismatch(ValueError):
    pass


def compare(run_dirs):
    """Mean and std of final test success per method and friction.

    Returns ``(csv_text, aligned_text)``. Runs must share a test dataset.
    """
    reports = []
    for d in run_dirs:
        rep = json.loads((Path(d) / "report.json").read_text())
        rep["_dir"] = str(d)
        reports.append(rep)
    if len(reports) < 2:
        raise ValueError("need at least two runs to compare")
    hashes = {r["data_hash"] for r in reports}
    if len(hashes) > 1:
        detail = ", ".join(f"{r['_dir']}={r['data_hash']}" for r in reports)
        raise ManifestMismatch(f"runs use different test datasets: {detail}")
    frictions = sorted(reports[0]["test_success"], key=float)
    by_method = {}
    for r in reports:
        by_method.setdefault(r["method"], []).append(r)
    rows = []
    for method in sorted(by_method):
        rs = by_method[method]
        row = {"method": method, "seeds": " ".join(str(r["seed"]) for r in rs), "n": len(rs)}
        for mu in frictions:
            vals = np.array([r["test_success"][mu] for r in rs])
            row[f"mean_{mu}"] = float(vals.mean())
            row[f"std_{mu}"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    for method, vals in REFERENCE_SUCCESS.items():
        row = {"method": f"reference:{method}", "seeds": "", "n": ""}
        for mu, v in zip(frictions, vals):
            row[f"mean_{mu}"] = v
            row[f"std_{mu}"] = ""
        rows.append(row)
    cols = ["method", "n", "seeds"] + [c for mu in frictions for c in (f"mean_{mu}", f"std_{mu}")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    width = max(len("method"), *(len(row["method"]) for row in rows)) + 2
    lines = [f"{'method':<{width}}{'n':>3}  " + "  ".join(f"{'mu=' + mu:>15}" for mu in frictions)]
    for row in rows:
        cells = []
        for mu in frictions:
            m, s = row[f"mean_{mu}"], row[f"std_{mu}"]
            cells.append(f"{m:.3f} ± {s:.3f}" if s != "" else f"{m:.3f} (ref)")
        lines.append(f"{row['method']:<{width}}{str(row['n']):>3}  " + "  ".join(f"{c:>15}" for c in cells))
    return buf.getvalue(), "\n".join(lines) + "\n"
