"""Adversarial environments by latent-space ascent on predicted cost.

Each source latent ``z0`` is pushed uphill on ``cost(z) - lam * ||z - z0||``
until its predicted cost rises by a target amount, a fraction of the spread of
predicted costs over the current environment set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from dragen.embed import (EmbedParams, build_latent_distribution, decode, encode,
                          predict_cost, predict_cost_grad)
from dragen.grasp import H_THR


@dataclass(frozen=True)
class AscentConfig:
    eta: float = 2.0
    lam: float = 0.005
    max_steps: int = 100
    target_frac: float = 0.1
    d_eps: float = 1e-12
    # "prox": distance penalty applied as a shrink toward z0 after the cost step;
    # "gradient": plain (sub)gradient of the distance term
    penalty: str = "prox"

    def __post_init__(self):
        if self.eta <= 0 or self.lam < 0 or self.max_steps < 1:
            raise ValueError("need eta > 0, lam >= 0, max_steps >= 1")
        if not 0.0 <= self.target_frac <= 1.0:
            raise ValueError("target_frac must be in [0, 1]")
        if self.penalty not in ("prox", "gradient"):
            raise ValueError(f"unknown penalty mode {self.penalty!r}")


@dataclass
class PerturbationRecord:
    z0: np.ndarray
    z: np.ndarray
    steps: int
    cost_before: float
    cost_after: float
    target_reached: bool
    displacement: float
    failed: bool = False
    source: int = -1

    def to_json(self):
        d = asdict(self)
        d["z0"] = self.z0.tolist()
        d["z"] = self.z.tolist()
        return d


def empirical_range(params: EmbedParams, maps) -> float:
    """Spread (max - min) of predicted costs over a set of heightmaps."""
    c = predict_cost(params, encode(params, np.asarray(maps).reshape(len(maps), -1)))
    return float(np.max(c) - np.min(c))


def _distance_grad(z, z0, d_eps):
    d = z - z0
    n = np.linalg.norm(d)
    return d / n if n >= d_eps else np.zeros_like(d)


def ascend(z0, params: EmbedParams, cfg: AscentConfig, target: float, cost_fn=None) -> PerturbationRecord:
    """Ascend from ``z0`` until predicted cost exceeds its start by more than ``target``.

    ``cost_fn(z) -> (cost, grad)`` overrides the embedding's predictor.
    """
    if target < 0:
        raise ValueError("target ascent must be non-negative")
    if cost_fn is None:
        def cost_fn(z):
            c, g = predict_cost_grad(params, z)
            return float(c[0]), g[0]
    z0 = np.asarray(z0, dtype=np.float64)
    c0, g = cost_fn(z0)
    z, c = z0.copy(), c0
    reached = failed = False
    steps = 0
    for steps in range(1, cfg.max_steps + 1):
        if cfg.penalty == "gradient":
            z_new = z + cfg.eta * (g - cfg.lam * _distance_grad(z, z0, cfg.d_eps))
        else:
            y = z + cfg.eta * g
            d = y - z0
            n = np.linalg.norm(d)
            shrink = max(0.0, 1.0 - cfg.eta * cfg.lam / n) if n >= cfg.d_eps else 0.0
            z_new = z0 + shrink * d
        if not np.all(np.isfinite(z_new)):
            failed = True
            break
        z = z_new
        c, g = cost_fn(z)
        if c - c0 > target:
            reached = True
            break
    return PerturbationRecord(z0.copy(), z, steps, c0, c, reached, float(np.linalg.norm(z - z0)), failed)


def generate_adversarial(maps, params: EmbedParams, K, cfg: AscentConfig, rng, occupancy_thr=H_THR):
    """Decode ``K`` ascended latents sampled with replacement from the set's embedding.

    Returns ``(heightmaps, records, target)``; ``records[i].source`` indexes
    the source environment.
    """
    maps = np.asarray(maps, dtype=np.float64)
    G = maps.shape[-1]
    if K == 0:
        return np.zeros((0, G, G)), [], 0.0
    dist = build_latent_distribution(maps, params)
    target = cfg.target_frac * empirical_range(params, maps)
    sources = rng.integers(len(dist), size=K)
    records = []
    for s in sources:
        rec = ascend(dist.atoms[s], params, cfg, target)
        rec.source = int(s)
        records.append(rec)
    out = decode(params, np.stack([r.z for r in records])).reshape(K, G, G)
    return out, records, target


def empty_after_threshold(h, thr=H_THR):
    return not np.any(np.asarray(h) >= thr)
