"""Exact discrete Wasserstein-1 distance and the robustness-bound checks built on it.

The transport problem between two finite distributions is solved as an integer
min-cost flow: weights are scaled to integer supplies (by the lcm of their
denominators) and successive shortest augmenting paths run on the dense
bipartite residual graph with Dijkstra and node potentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from dragen.embed import DiscreteDistribution


@dataclass
class TransportPlan:
    flows: list  # (source index, target index, mass)
    cost: float

    def marginals(self, m, n):
        a, b = np.zeros(m), np.zeros(n)
        for i, j, w in self.flows:
            a[i] += w
            b[j] += w
        return a, b


def _integer_supplies(weights, max_denominator=10**6):
    fr = [Fraction(float(w)).limit_denominator(max_denominator) for w in weights]
    for f, w in zip(fr, weights):
        if abs(float(f) - w) > 1e-12:
            raise ValueError(f"weight {w!r} is not a rational with denominator <= {max_denominator}")
    lcm = 1
    for f in fr:
        lcm = lcm * f.denominator // math.gcd(lcm, f.denominator)
    return [int(f * lcm) for f in fr], lcm


def _scaled(p: DiscreteDistribution, q: DiscreteDistribution):
    m, n = len(p), len(q)
    if np.allclose(p.weights, 1.0 / m, rtol=0, atol=1e-15) and np.allclose(q.weights, 1.0 / n, rtol=0, atol=1e-15):
        total = m * n // math.gcd(m, n)
        return [total // m] * m, [total // n] * n, total
    a, la = _integer_supplies(p.weights)
    b, lb = _integer_supplies(q.weights)
    total = la * lb // math.gcd(la, lb)
    a = [x * (total // la) for x in a]
    b = [x * (total // lb) for x in b]
    # rounding in limit_denominator can leave the sums off by a unit
    if sum(a) != total or sum(b) != total:
        raise ValueError("scaled supplies do not balance; weights must sum to exactly 1")
    return a, b, total


def min_cost_flow(cost, supply, demand):
    """Integer transportation problem by successive shortest paths.

    ``cost`` is ``(m, n)`` and non-negative; ``sum(supply) == sum(demand)``.
    Returns the ``(m, n)`` integer flow matrix.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if sum(supply) != sum(demand):
        raise ValueError("supply and demand totals differ")
    if np.any(cost < 0):
        raise ValueError("ground costs must be non-negative")
    N = m + n + 2
    s, t = 0, N - 1
    big = int(sum(supply))
    cap = np.zeros((N, N), dtype=np.int64)
    w = np.zeros((N, N))
    cap[s, 1 : m + 1] = supply
    cap[1 : m + 1, m + 1 : m + n + 1] = big
    cap[m + 1 : m + n + 1, t] = demand
    w[1 : m + 1, m + 1 : m + n + 1] = cost
    w[m + 1 : m + n + 1, 1 : m + 1] = -cost.T
    pi = np.zeros(N)
    remaining = big
    while remaining > 0:
        dist = np.full(N, np.inf)
        parent = np.full(N, -1)
        done = np.zeros(N, dtype=bool)
        dist[s] = 0.0
        while True:
            cand = np.where(done, np.inf, dist)
            u = int(np.argmin(cand))
            if not np.isfinite(cand[u]):
                break
            done[u] = True
            if u == t:
                break
            red = np.maximum(w[u] + pi[u] - pi, 0.0)
            nd = dist[u] + red
            better = (cap[u] > 0) & ~done & (nd < dist)
            dist[better] = nd[better]
            parent[better] = u
        if not done[t]:
            raise RuntimeError("no augmenting path; supplies and demands are inconsistent")
        pi += np.minimum(dist, dist[t])
        path = []
        v = t
        while v != s:
            path.append((parent[v], v))
            v = parent[v]
        push = min(int(cap[u, v]) for u, v in path)
        push = min(push, remaining)
        for u, v in path:
            cap[u, v] -= push
            cap[v, u] += push
        remaining -= push
    # flow on i->j equals residual capacity of the reverse arc j->i
    return cap[m + 1 : m + n + 1, 1 : m + 1].T.copy()


def ground_cost(p: DiscreteDistribution, q: DiscreteDistribution):
    if p.atoms.shape[1] != q.atoms.shape[1]:
        raise ValueError(f"atom dimensions differ: {p.atoms.shape[1]} vs {q.atoms.shape[1]}")
    diff = p.atoms[:, None, :] - q.atoms[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def wasserstein(p: DiscreteDistribution, q: DiscreteDistribution):
    """Exact W1 with Euclidean ground metric; returns ``(distance, plan)``."""
    c = ground_cost(p, q)
    a, b, total = _scaled(p, q)
    flow = min_cost_flow(c, a, b)
    ii, jj = np.nonzero(flow)
    flows = [(int(i), int(j), flow[i, j] / total) for i, j in zip(ii, jj)]
    dist = float(np.sum(flow * c) / total)
    return dist, TransportPlan(flows, dist)


# -- robustness bound checks -------------------------------------------------

@dataclass
class KRReport:
    gap: float
    bound: float
    slack: float
    distance: float
    lip_bound: float


def kr_check(p, q, cost_fn, lip_bound) -> KRReport:
    """Compare ``|E_p[c] - E_q[c]|`` with ``lip_bound * W(p, q)``."""
    d, _ = wasserstein(p, q)
    gap = abs(p.expect(cost_fn(p.atoms)) - q.expect(cost_fn(q.atoms)))
    bound = lip_bound * d
    return KRReport(gap, bound, bound - gap, d, lip_bound)


@dataclass
class BoundReport:
    rho: float
    lip_bound: float
    base_cost: float
    certified: float
    members: int = 0
    excluded: int = 0
    violations: int = 0
    worst_margin: float = math.inf  # min over members of certified - E[c]
    max_cost: float = -math.inf
    adversarial_members: int = 0
    adversarial_max_cost: float = -math.inf
    failures: list = field(default_factory=list)

    def passed(self):
        return self.violations == 0


def random_ball_candidate(atoms, rho, rng):
    """Displace every atom so the identity coupling costs ``rho * U[0.5, 1]``."""
    m, d = atoms.shape
    dirs = rng.standard_normal((m, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mags = rng.uniform(0.0, rho, size=m)
    mean = mags.mean()
    if mean > 0:
        mags *= rho * rng.uniform(0.5, 1.0) / mean
    return atoms + dirs * mags[:, None]


def project_into_ball(atoms0, atoms, rho):
    """Shrink displacements uniformly so their mean is at most ``rho``."""
    disp = atoms - atoms0
    mean = np.mean(np.linalg.norm(disp, axis=1))
    if mean <= rho or mean == 0:
        return atoms.copy()
    return atoms0 + disp * (rho / mean)


def verify_robust_bound(p0: DiscreteDistribution, cost_fn, lip_bound, rho, trials, rng,
                        adversarial=None, tol=1e-9) -> BoundReport:
    """Sample distributions in the W1 ball of radius ``rho`` around ``p0`` and
    check ``E[c] <= E_p0[c] + lip_bound * rho`` on every verified member.

    ``adversarial`` is an optional list of atom arrays (already ascended); they
    are projected into the ball and checked the same way.
    """
    base = p0.expect(cost_fn(p0.atoms))
    certified = base + lip_bound * rho
    rep = BoundReport(rho, lip_bound, base, certified)

    def check(atoms, adv):
        cand = DiscreteDistribution(atoms, p0.weights.copy())
        d, _ = wasserstein(cand, p0)
        if d > rho + tol:
            rep.excluded += 1
            return
        value = cand.expect(cost_fn(atoms))
        rep.members += 1
        rep.worst_margin = min(rep.worst_margin, certified - value)
        rep.max_cost = max(rep.max_cost, value)
        if adv:
            rep.adversarial_members += 1
            rep.adversarial_max_cost = max(rep.adversarial_max_cost, value)
        if value > certified + tol:
            rep.violations += 1
            if len(rep.failures) < 5:
                rep.failures.append({"rho": rho, "value": value, "certified": certified,
                                     "distance": d, "atoms": atoms.tolist()})

    if rho == 0:
        check(p0.atoms.copy(), False)
    else:
        for _ in range(trials):
            check(random_ball_candidate(p0.atoms, rho, rng), False)
    for atoms in adversarial or []:
        check(project_into_ball(p0.atoms, atoms, rho), True)
    return rep
