"""Pixel-scoring grasp policy with epsilon-greedy replay training.

For each orientation bin the heightmap is rotated so that bin's jaw axis is
horizontal, and a shared MLP scores the 9x9 patch around every pixel. The
best-scoring (bin, pixel) cell is mapped back to the original frame.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from dragen import nn
from dragen.grasp import BIN_AXES, N_BINS, GraspAction, reward

PATCH = 9
HIDDEN = 32
POLICY_LR = 3e-3
BATCH_SIZE = 128
REPLAY_CAPACITY = 1000
REPLAY_RATIO = 4


@lru_cache(maxsize=None)
def rotation_sources(G):
    """``(N_BINS, G, G, 2)`` source pixel (row, col) for each rotated-frame pixel.

    Bin k's rotated image shows the original at ``Rot(30k deg) @ offset``;
    sources may fall outside the grid.
    """
    c0 = (G - 1) / 2.0
    idx = np.arange(G, dtype=np.float64) - c0
    X, Y = np.meshgrid(idx, idx)
    out = np.empty((N_BINS, G, G, 2), dtype=np.int64)
    for k, (c, s) in enumerate(BIN_AXES):
        out[k, :, :, 0] = np.rint(s * X + c * Y + c0)
        out[k, :, :, 1] = np.rint(c * X - s * Y + c0)
    return out


def rotate_stack(h):
    """All ``N_BINS`` rotated copies of ``h`` (nearest neighbor, zero fill)."""
    G = h.shape[-1]
    src = rotation_sources(G)
    r, c = src[..., 0], src[..., 1]
    valid = (r >= 0) & (r < G) & (c >= 0) & (c < G)
    out = np.zeros((N_BINS, G, G))
    out[valid] = h[r[valid], c[valid]]
    return out


def patches(images):
    """Zero-padded ``PATCH x PATCH`` neighbourhoods: ``(..., G, G, PATCH**2)``."""
    half = PATCH // 2
    pad = [(0, 0)] * (images.ndim - 2) + [(half, half), (half, half)]
    padded = np.pad(images, pad)
    win = np.lib.stride_tricks.sliding_window_view(padded, (PATCH, PATCH), axis=(-2, -1))
    return win.reshape(*win.shape[:-2], PATCH * PATCH)


@dataclass
class Policy:
    scorer: nn.MlpParams

    @classmethod
    def init(cls, rng):
        spec = nn.MlpSpec((PATCH * PATCH, HIDDEN, 1), ("relu", "sigmoid"))
        return cls(nn.init_mlp(spec, rng))

    def copy(self):
        return Policy(self.scorer.copy())

    def score_maps(self, h):
        return score_maps(h, self)

    def greedy_action(self, h):
        return select_action(self.score_maps(h), 0.0, None, G=h.shape[-1])[0]

    def greedy_actions(self, maps, chunk=64):
        """Greedy actions for a stack of heightmaps, scored in chunks."""
        maps = np.asarray(maps, dtype=np.float64)
        out = []
        for i in range(0, len(maps), chunk):
            block = maps[i : i + chunk]
            rot = np.stack([rotate_stack(h) for h in block])
            s = nn.forward(self.scorer, patches(rot).reshape(-1, PATCH * PATCH))[0]
            s = s.reshape(len(block), N_BINS, *block.shape[1:])
            out.extend(select_action(x, 0.0, None, G=block.shape[-1])[0] for x in s)
        return out


def score_maps(h, policy: Policy):
    """``(N_BINS, G, G)`` success scores in each bin's rotated frame."""
    h = np.asarray(h, dtype=np.float64)
    G = h.shape[-1]
    p = patches(rotate_stack(h)).reshape(-1, PATCH * PATCH)
    return nn.forward(policy.scorer, p)[0].reshape(N_BINS, G, G)


def cell_to_action(k, r, c, G):
    src = rotation_sources(G)[k, r, c]
    return GraspAction(int(np.clip(src[0], 0, G - 1)), int(np.clip(src[1], 0, G - 1)), int(k))


def select_action(scores, eps, rng, G=None):
    """Epsilon-greedy choice over all (bin, row, col) cells.

    Returns ``(action, cell)`` with ``cell = (bin, row, col)`` in the rotated
    frame. Greedy ties go to the lowest bin, then row-major pixel order.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must be in [0, 1]")
    scores = np.asarray(scores)
    G = G or scores.shape[-1]
    explore = eps > 0 and rng.random() < eps
    flat = int(rng.integers(scores.size)) if explore else int(np.argmax(scores))
    k, rem = divmod(flat, G * G)
    r, c = divmod(rem, G)
    return cell_to_action(k, r, c, G), (k, r, c)


@dataclass
class ExplorationSchedule:
    start: float = 1.0
    end: float = 0.2
    anneal_steps: int = 1000

    def __call__(self, step):
        if self.anneal_steps <= 0:
            return self.end
        frac = min(step / self.anneal_steps, 1.0)
        return self.start + (self.end - self.start) * frac


@dataclass
class Transition:
    env_index: int
    action: GraspAction
    cell: tuple
    patch: np.ndarray  # the scored patch, so updates need not re-rotate
    outcome: int


class ReplayBuffer:
    def __init__(self, capacity=REPLAY_CAPACITY):
        self.items = deque(maxlen=capacity)
        self.capacity = capacity

    def __len__(self):
        return len(self.items)

    def push(self, t: Transition):
        self.items.append(t)

    def sample(self, n, rng):
        n = min(n, len(self.items))
        idx = rng.choice(len(self.items), size=n, replace=False)
        return [self.items[i] for i in idx]


def bce_loss_and_grads(policy: Policy, patches_, outcomes):
    y = np.asarray(outcomes, dtype=np.float64)
    p, cache = nn.forward(policy.scorer, patches_)
    p = p[:, 0]
    eps = 1e-15
    loss = -float(np.mean(y * np.log(np.maximum(p, eps)) + (1 - y) * np.log(np.maximum(1 - p, eps))))
    # d BCE / d p, written so the sigmoid derivative cancels cleanly
    denom = np.maximum(p * (1 - p), 1e-300)
    g = ((p - y) / denom / len(y))[:, None]
    grads, _ = nn.backward(policy.scorer, cache, g)
    return loss, grads


class PolicyTrainer:
    """Holds the optimizer state and replay buffer across outer iterations."""

    def __init__(self, policy: Policy, lr=POLICY_LR, batch_size=BATCH_SIZE,
                 replay_ratio=REPLAY_RATIO, capacity=REPLAY_CAPACITY):
        self.policy = policy
        self.lr = lr
        self.batch_size = batch_size
        self.replay_ratio = replay_ratio
        self.buffer = ReplayBuffer(capacity)
        self.opt = nn.AdamState.zeros_like(policy.scorer.arrays())
        self.skipped = 0

    def update(self, batch):
        """One BCE step through the executed cells only."""
        if not batch:
            raise ValueError("empty batch")
        x = np.stack([t.patch for t in batch])
        y = [t.outcome for t in batch]
        loss, grads = bce_loss_and_grads(self.policy, x, y)
        if not np.isfinite(loss):
            self.skipped += 1
            return loss
        nn.adam_step(self.policy.scorer.arrays(), grads.arrays(), self.opt, self.lr)
        return loss

    def train(self, maps, steps, rng, schedule=None, window=100, log=None):
        """Epsilon-greedy interaction with uniformly drawn environments.

        Returns the trailing success rate history; ``self.policy`` ends at the
        parameters of the best trailing-``window`` success rate.
        """
        maps = np.asarray(maps, dtype=np.float64)
        if len(maps) == 0:
            raise ValueError("no environments to train on")
        schedule = schedule or ExplorationSchedule(anneal_steps=steps)
        G = maps.shape[-1]
        recent = deque(maxlen=window)
        best_rate, best = -1.0, None
        rates = []
        for step in range(steps):
            i = int(rng.integers(len(maps)))
            h = maps[i]
            rot = rotate_stack(h)
            p = patches(rot)
            s = nn.forward(self.policy.scorer, p.reshape(-1, PATCH * PATCH))[0].reshape(N_BINS, G, G)
            action, cell = select_action(s, schedule(step), rng, G)
            r = reward(h, action)
            self.buffer.push(Transition(i, action, cell, p[cell].copy(), r))
            for _ in range(self.replay_ratio):
                self.update(self.buffer.sample(self.batch_size, rng))
            recent.append(r)
            rate = sum(recent) / len(recent)
            rates.append(rate)
            if len(recent) == window and rate > best_rate:
                best_rate, best = rate, self.policy.copy()
            if log is not None:
                log(step, r, rate)
        if best is not None:
            self.policy.scorer = best.scorer
        return rates
