"""Autoencoder plus Lipschitz-regularized cost predictor over heightmaps.

The joint loss is

    L = L_rec + a1 * L_pred + a2 * (lip_bound - lip_target)**2 + a3 * mean ||z||^2

where ``lip_bound = ||W0||_2 * ||W1||_2 / 16`` bounds the Lipschitz constant
of the two-layer sigmoid predictor (each sigmoid has slope at most 1/4).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dragen import nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedLossWeights:
    alpha_pred: float = 0.1
    alpha_lip: float = 1.0
    alpha_norm: float = 0.1
    lip_target: float = 0.04

    def __post_init__(self):
        if min(self.alpha_pred, self.alpha_lip, self.alpha_norm) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lip_target <= 0:
            raise ValueError("lip_target must be positive")


@dataclass
class EmbedParams:
    encoder: nn.MlpParams
    decoder: nn.MlpParams
    predictor: nn.MlpParams
    # warm-started right singular vectors of the two predictor matrices
    sn_v: list = field(default_factory=lambda: [None, None])

    def __post_init__(self):
        if self.predictor.spec.n_layers != 2:
            raise nn.ConfigurationError("the cost predictor must have exactly two layers")

    @property
    def latent_dim(self):
        return self.encoder.spec.layer_widths[-1]

    def arrays(self):
        return self.encoder.arrays() + self.decoder.arrays() + self.predictor.arrays()

    def copy(self):
        return EmbedParams(
            self.encoder.copy(), self.decoder.copy(), self.predictor.copy(),
            [None if v is None else v.copy() for v in self.sn_v],
        )

    def nets(self):
        return {"encoder": self.encoder, "decoder": self.decoder, "predictor": self.predictor}


def init_embed(n_pixels, rng, latent_dim=16, hidden=64, predictor_hidden=16) -> EmbedParams:
    enc = nn.MlpSpec((n_pixels, hidden, latent_dim), ("sigmoid", "identity"))
    dec = nn.MlpSpec((latent_dim, hidden, n_pixels), ("relu", "sigmoid"))
    pred = nn.MlpSpec((latent_dim, predictor_hidden, 1), ("sigmoid", "sigmoid"))
    return EmbedParams(nn.init_mlp(enc, rng), nn.init_mlp(dec, rng), nn.init_mlp(pred, rng))


def _flat(maps):
    maps = np.asarray(maps, dtype=np.float64)
    return maps.reshape(maps.shape[0], -1) if maps.ndim == 3 else maps


def encode(params: EmbedParams, maps):
    """Latent codes for one heightmap (``(G, G)`` or flat) or a stack of them.

    A 2-D input whose rows have the encoder's input width is a flat batch.
    """
    maps = np.asarray(maps, dtype=np.float64)
    width = params.encoder.spec.layer_widths[0]
    if maps.ndim == 1 or (maps.ndim == 2 and maps.shape[1] != width):
        return nn.forward(params.encoder, maps.ravel())[0]
    return nn.forward(params.encoder, _flat(maps))[0]


def decode(params: EmbedParams, z):
    z = np.asarray(z, dtype=np.float64)
    out = nn.forward(params.decoder, np.atleast_2d(z))[0]
    side = int(round(np.sqrt(out.shape[1])))
    out = out.reshape(-1, side, side)
    return out[0] if z.ndim == 1 else out


def predict_cost(params: EmbedParams, z):
    z = np.asarray(z, dtype=np.float64)
    out = nn.forward(params.predictor, np.atleast_2d(z))[0][:, 0]
    return float(out[0]) if z.ndim == 1 else out


def predict_cost_grad(params: EmbedParams, z):
    """Predicted cost and its gradient with respect to the latent ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out, cache = nn.forward(params.predictor, z)
    _, gz = nn.backward(params.predictor, cache, np.ones_like(out))
    return out[:, 0], gz


def lipschitz_upper_bound(w0, w1, iters=100):
    return nn.spectral_norm(w0, iters).sigma * nn.spectral_norm(w1, iters).sigma / 16.0


def predictor_lipschitz_bound(params: EmbedParams, iters=100):
    return lipschitz_upper_bound(params.predictor.weights[0], params.predictor.weights[1], iters)


@dataclass
class LossReport:
    total: float
    rec: float
    pred: float
    lip: float
    norm: float
    lip_bound: float


def embedding_loss(maps, costs, params: EmbedParams, weights: EmbedLossWeights,
                   sn_iters=100, warm_start=False):
    """Joint loss and its gradient (a list parallel to ``params.arrays()``).

    With ``warm_start`` the power iteration starts from (and updates) the
    stored singular vectors; otherwise it starts fresh each call.
    """
    x = _flat(maps)
    y = np.asarray(costs, dtype=np.float64).reshape(-1)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("true costs must lie in [0, 1]")
    B = x.shape[0]

    z, enc_cache = nn.forward(params.encoder, x)
    xr, dec_cache = nn.forward(params.decoder, z)
    c, pred_cache = nn.forward(params.predictor, z)

    sn = []
    for i in range(2):
        s = nn.spectral_norm(params.predictor.weights[i], sn_iters,
                             params.sn_v[i] if warm_start else None)
        if warm_start:
            params.sn_v[i] = s.v
        sn.append(s)
    lip_bound = sn[0].sigma * sn[1].sigma / 16.0

    rec = float(np.mean((xr - x) ** 2))
    pred = float(np.mean((c[:, 0] - y) ** 2))
    lip = (lip_bound - weights.lip_target) ** 2
    norm = float(np.mean(np.sum(z * z, axis=1)))
    total = rec + weights.alpha_pred * pred + weights.alpha_lip * lip + weights.alpha_norm * norm
    if not np.isfinite(total):
        raise nn.NumericError(f"non-finite embedding loss (rec={rec}, pred={pred}, lip={lip}, norm={norm})")

    g_dec, gz_dec = nn.backward(params.decoder, dec_cache, 2.0 * (xr - x) / xr.size)
    g_pred, gz_pred = nn.backward(
        params.predictor, pred_cache, weights.alpha_pred * 2.0 * (c - y[:, None]) / B
    )
    dlip = weights.alpha_lip * 2.0 * (lip_bound - weights.lip_target) / 16.0
    g_pred.weights[0] = g_pred.weights[0] + dlip * sn[1].sigma * sn[0].grad()
    g_pred.weights[1] = g_pred.weights[1] + dlip * sn[0].sigma * sn[1].grad()
    gz = gz_dec + gz_pred + weights.alpha_norm * 2.0 * z / B
    g_enc, _ = nn.backward(params.encoder, enc_cache, gz)

    grads = g_enc.arrays() + g_dec.arrays() + g_pred.arrays()
    return LossReport(total, rec, pred, lip, norm, lip_bound), grads


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    epoch_rec: list = field(default_factory=list)
    epoch_pred: list = field(default_factory=list)
    epoch_lip_bound: list = field(default_factory=list)


def train_embedding(params: EmbedParams, maps, costs, epochs, rng, weights=EmbedLossWeights(),
                    lr=1e-3, batch_size=4, sn_iters=5, opt_state=None):
    """Mini-batch Adam on :func:`embedding_loss`; updates ``params`` in place.

    Returns ``(params, opt_state, log)``. Aborts with :class:`DivergenceError`
    if the epoch loss stays above ten times the first epoch's for three epochs.
    """
    x = _flat(maps)
    y = np.asarray(costs, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} maps but {len(y)} cost labels")
    arrays = params.arrays()
    if opt_state is None:
        opt_state = nn.AdamState.zeros_like(arrays)
    history = TrainLog()
    bad_epochs = 0
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        tot = rec = pred = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            report, grads = embedding_loss(x[idx], y[idx], params, weights, sn_iters, warm_start=True)
            nn.adam_step(arrays, grads, opt_state, lr)
            n = len(idx)
            tot += report.total * n
            rec += report.rec * n
            pred += report.pred * n
        history.epoch_loss.append(tot / len(x))
        history.epoch_rec.append(rec / len(x))
        history.epoch_pred.append(pred / len(x))
        history.epoch_lip_bound.append(report.lip_bound)
        if history.epoch_loss[-1] > 10.0 * history.epoch_loss[0]:
            bad_epochs += 1
            if bad_epochs >= 3:
                raise DivergenceError(
                    f"embedding loss diverged at epoch {epoch}: {history.epoch_loss[-1]:.4g} "
                    f"vs initial {history.epoch_loss[0]:.4g}"
                )
        else:
            bad_epochs = 0
    return params, opt_state, history


@dataclass
class DiscreteDistribution:
    atoms: np.ndarray  # (m, d)
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.atoms) == 0:
            raise ValueError("a distribution needs at least one atom")
        if self.weights.shape != (len(self.atoms),) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per atom")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}")

    @classmethod
    def uniform(cls, atoms):
        atoms = np.atleast_2d(np.asarray(atoms, dtype=np.float64))
        return cls(atoms, np.full(len(atoms), 1.0 / len(atoms)))

    def __len__(self):
        return len(self.atoms)

    def expect(self, f_values):
        return float(np.dot(self.weights, f_values))


def build_latent_distribution(maps, params: EmbedParams) -> DiscreteDistribution:
    maps = np.asarray(maps)
    if len(maps) == 0:
        raise ValueError("cannot build a latent distribution from an empty set")
    return DiscreteDistribution.uniform(encode(params, maps.reshape(len(maps), -1)))
