"""Self-contained verification suites behind ``dragen verify``.

Each suite returns a JSON-serialisable report with ``passed``, counts, worst
margins and (on failure) the first failing case.
"""

from __future__ import annotations

import itertools
import time
from functools import lru_cache

import numpy as np

from dragen import nn
from dragen.advgen import AscentConfig, ascend
from dragen.embed import (DiscreteDistribution, EmbedLossWeights, EmbedParams, embedding_loss, encode,
                          init_embed, predict_cost, predict_cost_grad, predictor_lipschitz_bound,
                          train_embedding)
from dragen.envs import (default_test_config, default_train_config, generate_dr_object, rotate_quarter,
                         sample_dataset)
from dragen.grasp import (N_BINS, SWEEP_FRICTIONS, GraspAction, _geometry, _holds, cost_from_first_success,
                          execute_grasp, label_action)
from dragen.ot import verify_robust_bound, wasserstein
from dragen.policy import Policy, PolicyTrainer

SUITES = ("gradcheck", "lipschitz", "ot", "theorem1", "oracle", "ascent")
RHOS = (0.0, 0.5, 1.0, 2.0)
LAMBDAS = (0.0, 0.1, 1.0, 10.0)


# -- shared helpers ---------------------------------------------------------

def relative_error(analytic, numeric):
    """Max-abs difference scaled by the larger max-abs of the two arrays."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - n)) / scale)


def finite_difference(f, arrays, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def random_mlp(rng, widths, acts, scale=1.0):
    p = nn.init_mlp(nn.MlpSpec(widths, acts), rng)
    for w, b in zip(p.weights, p.biases):
        w *= scale
        b += rng.normal(0, 0.3, size=b.shape)
    return p


@lru_cache(maxsize=8)
def trained_fixture(seed, n_envs=200, policy_steps=1000, epochs=200):
    """Policy-labelled train set and an embedding trained on it with default weights."""
    rng = np.random.default_rng(seed)
    data = sample_dataset(default_train_config(), n_envs, [seed, 7])
    trainer = PolicyTrainer(Policy.init(rng))
    trainer.train(data.heightmaps, policy_steps, rng)
    actions = trainer.policy.greedy_actions(data.heightmaps)
    costs = np.array([label_action(h, a).value for h, a in zip(data.heightmaps, actions)])
    params = init_embed(data.G**2, rng)
    params, _, history = train_embedding(params, data.heightmaps, costs, epochs, rng)
    return data.heightmaps, costs, params, history


def _cost_fn(params):
    return lambda atoms: predict_cost(params, np.atleast_2d(atoms))


def _finish(report, t0):
    report["seconds"] = round(time.perf_counter() - t0, 3)
    return report


# -- suites -----------------------------------------------------------------

def suite_gradcheck(seed=0, n_fixtures=20):
    """MLP and joint embedding-loss gradients against central differences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    mlp_worst = joint_worst = 0.0
    failure = None
    act_choices = ("sigmoid", "identity", "relu")
    for k in range(n_fixtures):
        n_layers = int(rng.integers(1, 4))
        widths = tuple(int(w) for w in rng.integers(1, 6, size=n_layers + 1))
        acts = tuple(act_choices[int(i)] for i in rng.integers(0, 3, size=n_layers))
        p = random_mlp(rng, widths, acts)
        x = rng.normal(size=(3, widths[0]))
        c = rng.normal(size=(3, widths[-1]))

        def loss():
            return float(np.sum(c * nn.forward(p, x)[0]))

        out, cache = nn.forward(p, x)
        grads, gx = nn.backward(p, cache, c)
        numeric = finite_difference(loss, p.arrays())
        err = max(relative_error(a, n) for a, n in zip(grads.arrays(), numeric))
        mlp_worst = max(mlp_worst, err)
        if err > 1e-5 and failure is None:
            failure = {"kind": "mlp", "fixture": k, "widths": widths, "acts": acts, "rel_err": err}

    weights = EmbedLossWeights()
    for k in range(n_fixtures):
        params = init_embed(9, rng, latent_dim=3, hidden=4, predictor_hidden=3)
        for a in params.arrays():
            a += rng.normal(0, 0.3, size=a.shape)
        maps = rng.uniform(0, 1, size=(4, 9))
        costs = rng.choice(np.round(np.arange(11) * 0.1, 1), size=4)
        report, grads = embedding_loss(maps, costs, params, weights, sn_iters=100)
        numeric = finite_difference(
            lambda: embedding_loss(maps, costs, params, weights, sn_iters=100)[0].total, params.arrays())
        err = max(relative_error(a, n) for a, n in zip(grads, numeric))
        joint_worst = max(joint_worst, err)
        if err > 1e-4 and failure is None:
            failure = {"kind": "joint", "fixture": k, "rel_err": err}
    return _finish({
        "suite": "gradcheck", "fixtures": n_fixtures, "mlp_worst_rel_err": mlp_worst,
        "joint_worst_rel_err": joint_worst, "mlp_threshold": 1e-5, "joint_threshold": 1e-4,
        "passed": mlp_worst <= 1e-5 and joint_worst <= 1e-4, "first_failure": failure,
    }, t0)


def max_difference_quotient(params: EmbedParams, rng, n_pairs=100_000, scale=1.0, center=None):
    """Largest sampled ``|h(a) - h(b)| / ||a - b||`` over random and gradient-aligned pairs."""
    d = params.latent_dim
    center = np.zeros(d) if center is None else center
    half = n_pairs // 2
    a = center + scale * rng.standard_normal((half, d))
    b = center + scale * rng.standard_normal((half, d))
    # short steps along the local gradient probe the local slope
    c = center + scale * rng.standard_normal((n_pairs - half, d))
    _, g = predict_cost_grad(params, c)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    gn[gn == 0] = 1.0
    step = 10.0 ** rng.uniform(-6, 0, size=(len(c), 1)) * scale
    e = c + step * g / gn
    lhs = np.concatenate([a, c])
    rhs = np.concatenate([b, e])
    num = np.abs(predict_cost(params, lhs) - predict_cost(params, rhs))
    den = np.linalg.norm(lhs - rhs, axis=1)
    return float(np.max(num / den))


def suite_lipschitz(seed=0, n_random=10, trained_seeds=(0, 1, 2), n_pairs=100_000):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(n_random):
        scale = 10.0 ** rng.uniform(-1, 1)
        pred = random_mlp(rng, (16, 16, 1), ("sigmoid", "sigmoid"), scale)
        params = init_embed(4, rng)
        params.predictor = pred
        bound = predictor_lipschitz_bound(params)
        q = max_difference_quotient(params, rng, n_pairs, scale=1.0 / scale)
        cases.append({"kind": "random", "index": k, "bound": bound, "max_quotient": q, "margin": bound - q})
    trained = []
    for s in trained_seeds:
        maps, _, params, _ = trained_fixture(s)
        z = encode(params, maps)
        bound = predictor_lipschitz_bound(params)
        q = max_difference_quotient(params, rng, n_pairs, scale=float(np.std(z)) * 3, center=z.mean(axis=0))
        cases.append({"kind": "trained", "seed": s, "bound": bound, "max_quotient": q, "margin": bound - q})
        trained.append({"seed": s, "lip_bound": bound, "deviation": abs(bound - 0.04)})
    sound = all(c["margin"] >= -1e-9 for c in cases)
    close = all(t["deviation"] <= 0.02 for t in trained)
    failure = next((c for c in cases if c["margin"] < -1e-9), None) or next(
        (t for t in trained if t["deviation"] > 0.02), None)
    return _finish({
        "suite": "lipschitz", "cases": len(cases), "pairs_per_case": n_pairs,
        "worst_margin": min(c["margin"] for c in cases), "trained": trained,
        "passed": sound and close, "first_failure": failure,
    }, t0)


def brute_force_w1(x, y):
    """Equal-size uniform W1 by enumerating all matchings."""
    c = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
    m = len(x)
    return min(c[np.arange(m), list(p)].mean() for p in itertools.permutations(range(m)))


def suite_ot(seed=0, n_pairs=200, n_triples=200):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    failure = None
    for k in range(n_pairs):
        m = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        x, y = rng.normal(size=(m, d)), rng.normal(size=(m, d))
        w, plan = wasserstein(DiscreteDistribution.uniform(x), DiscreteDistribution.uniform(y))
        err = abs(w - brute_force_w1(x, y))
        a, b = plan.marginals(m, m)
        err_marg = max(np.max(np.abs(a - 1 / m)), np.max(np.abs(b - 1 / m)))
        worst = max(worst, err)
        if (err > 1e-9 or err_marg > 1e-9) and failure is None:
            failure = {"pair": k, "x": x.tolist(), "y": y.tolist(), "error": err, "marginal_error": err_marg}
    sym_worst = tri_worst = 0.0
    for k in range(n_triples):
        d = int(rng.integers(1, 4))
        P, Q, R = (DiscreteDistribution.uniform(rng.normal(size=(int(rng.integers(1, 7)), d))) for _ in range(3))
        pq = wasserstein(P, Q)[0]
        qp = wasserstein(Q, P)[0]
        pr = wasserstein(P, R)[0]
        qr = wasserstein(Q, R)[0]
        sym_worst = max(sym_worst, abs(pq - qp))
        tri_worst = max(tri_worst, pr - (pq + qr))
        if (abs(pq - qp) > 1e-9 or pr > pq + qr + 1e-9) and failure is None:
            failure = {"triple": k, "pq": pq, "qp": qp, "pr": pr, "qr": qr}
    one = DiscreteDistribution.uniform([[0.0], [1.0]])
    two = DiscreteDistribution.uniform([[1.0], [2.0]])
    three = DiscreteDistribution.uniform([[2.0], [3.0]])
    w12, w23, w13 = (wasserstein(a, b)[0] for a, b in ((one, two), (two, three), (one, three)))
    intervals = w12 == w23 == 1.0 and w12 < w13
    if not intervals and failure is None:
        failure = {"w12": w12, "w23": w23, "w13": w13}
    return _finish({
        "suite": "ot", "pairs": n_pairs, "triples": n_triples, "worst_bruteforce_error": worst,
        "worst_asymmetry": sym_worst, "worst_triangle_excess": tri_worst,
        "intervals": {"w12": w12, "w23": w23, "w13": w13},
        "passed": failure is None, "first_failure": failure,
    }, t0)


def adversarial_atoms(params, atoms, etas=(0.5, 2.0, 8.0), steps=100):
    """Atoms pushed uphill with no distance penalty (one candidate per step size)."""
    out = []
    for eta in etas:
        cfg = AscentConfig(eta=eta, lam=0.0, max_steps=steps)
        out.append(np.stack([ascend(z, params, cfg, target=np.inf).z for z in atoms]))
    return out


def suite_theorem1(seed=0, trained_seeds=(0,), rhos=RHOS, trials=1000, n_atoms=20):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    reports = []
    for s in trained_seeds:
        maps, _, params, _ = trained_fixture(s)
        atoms = encode(params, maps[:n_atoms])
        p0 = DiscreteDistribution.uniform(atoms)
        lip = predictor_lipschitz_bound(params)
        adv = adversarial_atoms(params, atoms)
        for rho in rhos:
            rep = verify_robust_bound(p0, _cost_fn(params), lip, rho, trials, rng, adversarial=adv)
            reports.append({"fixture": s, **{k: v for k, v in rep.__dict__.items() if k != "failures"},
                            "failures": rep.failures[:1]})
    violations = sum(r["violations"] for r in reports)
    members = sum(r["members"] for r in reports)
    failure = next((r["failures"][0] for r in reports if r["failures"]), None)
    return _finish({
        "suite": "theorem1", "rhos": list(rhos), "trials_per_rho": trials, "members": members,
        "violations": violations, "worst_margin": min(r["worst_margin"] for r in reports),
        "per_rho": [{k: r[k] for k in ("fixture", "rho", "members", "excluded", "violations", "base_cost",
                                       "certified", "max_cost", "worst_margin", "adversarial_members",
                                       "adversarial_max_cost")} for r in reports],
        "passed": violations == 0, "first_failure": failure,
    }, t0)


def _oracle_maps(rng, n):
    train = sample_dataset(default_train_config(), n // 3, [int(rng.integers(2**31)), 0]).heightmaps
    test = sample_dataset(default_test_config(), n // 3, [int(rng.integers(2**31)), 1]).heightmaps
    dr = np.stack([generate_dr_object(rng) for _ in range(n - 2 * (n // 3))])
    return np.concatenate([train, test, dr])


def rotate_action(a: GraspAction, G):
    """The action that corresponds to ``a`` after a quarter turn of the heightmap."""
    return GraspAction(a.col, G - 1 - a.row, (a.orientation_bin + 3) % N_BINS)


def _rotate_point(p, G):
    x, y = p
    return (G - 1 - y, x)


def same_outcome(o1, o2, G):
    if o1.success != o2.success or o1.reason != o2.reason or o1.cone_angle != o2.cone_angle:
        return False
    if o1.contacts is None or o2.contacts is None:
        return o1.contacts is None and o2.contacts is None
    # contact coordinates go through different float sums, so allow an ulp or two
    rot = sorted(tuple(_rotate_point(c, G)) for c in o1.contacts)
    return np.allclose(rot, sorted(tuple(c) for c in o2.contacts), rtol=0, atol=1e-9)


def suite_oracle(seed=0, n_pairs=10_000, n_rot_shapes=100, actions_per_shape=20):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    maps = _oracle_maps(rng, 300)
    G = maps.shape[-1]
    grid = np.round(np.arange(0.05, 1.0001, 0.05), 2)
    mono_fail = None
    first_success_found = {}
    for k in range(n_pairs):
        h = maps[int(rng.integers(len(maps)))]
        a = GraspAction(int(rng.integers(G)), int(rng.integers(G)), int(rng.integers(N_BINS)))
        ok = [execute_grasp(h, a, mu).success for mu in grid]
        if any(x and not y for x, y in zip(ok, ok[1:])) and mono_fail is None:
            mono_fail = {"pair": k, "action": a.__dict__, "success": ok}
        geom = _geometry(h, a)
        first = next((mu for mu in SWEEP_FRICTIONS if _holds(geom, mu)), None)
        if first not in first_success_found:
            first_success_found[first] = (h, a)
    spot = {}
    for mu, expected in ((0.10, 0.0), (0.30, 0.4), (None, 1.0)):
        label_direct = cost_from_first_success(mu).value
        case = first_success_found.get(mu)
        label_run = label_action(*case).value if case else None
        spot[str(mu)] = {"expected": expected, "mapping": label_direct, "executed": label_run,
                         "ok": label_direct == expected and label_run == expected}
    rot_fail = None
    rot_checked = 0
    for i in range(n_rot_shapes):
        h = maps[i * len(maps) // n_rot_shapes]
        hr = rotate_quarter(h)
        for _ in range(actions_per_shape):
            a = GraspAction(int(rng.integers(G)), int(rng.integers(G)), int(rng.integers(N_BINS)))
            o1 = execute_grasp(h, a, 0.3)
            o2 = execute_grasp(hr, rotate_action(a, G), 0.3)
            rot_checked += 1
            if not same_outcome(o1, o2, G) and rot_fail is None:
                rot_fail = {"shape": i, "action": a.__dict__, "outcome": str(o1), "rotated": str(o2)}
    passed = mono_fail is None and rot_fail is None and all(v["ok"] for v in spot.values())
    return _finish({
        "suite": "oracle", "monotonicity_pairs": n_pairs, "rotation_checks": rot_checked,
        "cost_spot_checks": spot, "passed": passed,
        "first_failure": mono_fail or rot_fail or next((v for v in spot.values() if not v["ok"]), None),
    }, t0)


def suite_ascent(seed=0, fixture_seed=0, n_sources=100, cfg: AscentConfig = None):
    """Target-reach rate of the default ascent and displacement versus penalty."""
    from dragen.advgen import empirical_range

    t0 = time.perf_counter()
    cfg = cfg or AscentConfig()
    maps, _, params, _ = trained_fixture(fixture_seed)
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(maps), size=n_sources)
    z0 = encode(params, maps[idx])
    target = cfg.target_frac * empirical_range(params, maps)
    recs = [ascend(z, params, cfg, target) for z in z0]
    reached = float(np.mean([r.target_reached for r in recs]))
    medians = []
    for lam in LAMBDAS:
        c = AscentConfig(cfg.eta, lam, cfg.max_steps, cfg.target_frac, cfg.d_eps, cfg.penalty)
        medians.append(float(np.median([ascend(z, params, c, target).displacement for z in z0])))
    monotone = all(b <= a for a, b in zip(medians, medians[1:]))
    return _finish({
        "suite": "ascent", "target": target, "reached_fraction": reached,
        "median_steps": float(np.median([r.steps for r in recs])),
        "lambdas": list(LAMBDAS), "median_displacement": medians,
        "passed": reached >= 0.8 and monotone,
        "first_failure": None if reached >= 0.8 and monotone else {"reached": reached, "medians": medians},
    }, t0)


RUNNERS = {
    "gradcheck": suite_gradcheck,
    "lipschitz": suite_lipschitz,
    "ot": suite_ot,
    "theorem1": suite_theorem1,
    "oracle": suite_oracle,
    "ascent": suite_ascent,
}


def run_suite(name, seed=0):
    if name not in RUNNERS:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return RUNNERS[name](seed=seed)
