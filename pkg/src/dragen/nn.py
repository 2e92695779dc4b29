"""Dense network kernels: forward/backward, Adam, spectral norm, checkpoints.

Everything is float64. Weight matrices are stored ``(out, in)`` so a layer
computes ``a = act(x @ W.T + b)`` on a batch ``x`` of shape ``(B, in)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("sigmoid", "relu", "identity")


class ConfigurationError(ValueError):
    """Shapes or settings that cannot describe a valid network."""


class UsageError(RuntimeError):
    """An API was called with state from a different call (e.g. stale cache)."""


class NumericError(FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activations: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        acts = tuple(self.activations)
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigurationError(f"need >= 2 positive widths, got {widths}")
        if len(acts) != len(widths) - 1:
            raise ConfigurationError(
                f"{len(widths) - 1} layers but {len(acts)} activations"
            )
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ConfigurationError(f"unknown activation(s) {bad}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self):
        return len(self.activations)


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list
    biases: list

    def arrays(self):
        """Parameters in declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return MlpParams(
            self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def check(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.spec.layer_widths[i], self.spec.layer_widths[i + 1]
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ConfigurationError(
                    f"layer {i}: got W{w.shape} b{b.shape}, expected ({n_out}, {n_in})"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"non-finite parameters in layer {i}", layer=i)


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(spec, weights, biases)


@dataclass
class ForwardCache:
    params_id: int
    inputs: list  # input to each layer
    outputs: list  # post-activation output of each layer


def _activate(kind, pre):
    if kind == "sigmoid":
        return sigmoid(pre)
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(kind, out, grad):
    # derivative expressed through the layer output
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    if kind == "relu":
        return grad * (out > 0)
    return grad


def forward(params: MlpParams, x):
    """Evaluate the network on ``x`` (a vector or a ``(B, in)`` batch).

    Returns ``(output, cache)``; the output keeps the input's rank.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != params.spec.layer_widths[0]:
        raise ConfigurationError(
            f"input width {a.shape[1]} != first layer width {params.spec.layer_widths[0]}"
        )
    inputs, outputs = [], []
    for w, b, kind in zip(params.weights, params.biases, params.spec.activations):
        inputs.append(a)
        a = _activate(kind, a @ w.T + b)
        outputs.append(a)
    cache = ForwardCache(id(params), inputs, outputs)
    return (a[0] if single else a), cache


def backward(params: MlpParams, cache: ForwardCache, grad_output):
    """Backpropagate ``grad_output`` (dLoss/d output) through a forward cache.

    Gradients are summed over the batch. Returns ``(param_grads, grad_input)``
    where ``param_grads`` is an :class:`MlpParams` of gradients.
    """
    if cache.params_id != id(params) or len(cache.outputs) != params.spec.n_layers:
        raise UsageError("cache was produced by a different parameter set")
    g = np.asarray(grad_output, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise UsageError(f"grad shape {g.shape} != output shape {cache.outputs[-1].shape}")
    gw = [None] * params.spec.n_layers
    gb = [None] * params.spec.n_layers
    for i in reversed(range(params.spec.n_layers)):
        g = _activation_grad(params.spec.activations[i], cache.outputs[i], g)
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return MlpParams(params.spec, gw, gb), (g[0] if single else g)


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **kw):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are parallel lists of arrays. Returns
    ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigurationError("params, grads and Adam moments differ in length")
    for i, g in enumerate(grads):
        # a sum is non-finite iff some entry is (cheaper than isfinite on every entry)
        if not np.isfinite(np.sum(g)):
            raise NumericError(f"non-finite gradient in array {i} (layer {i // 2})", layer=i // 2)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1**t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2**t)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_c2
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= step
        p -= denom
    return params, state


@dataclass
class SpectralNorm:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    zero: bool = False

    def grad(self):
        """d sigma / d W for the top singular pair."""
        return np.outer(self.u, self.v)


def spectral_norm(w, iters=100, v0=None) -> SpectralNorm:
    """Largest singular value of ``w`` by power iteration on ``w.T @ w``.

    ``v0`` warm-starts the right singular vector; otherwise a fixed
    deterministic start is used so results do not depend on global RNG state.
    """
    w = np.asarray(w, dtype=np.float64)
    if iters < 1:
        raise ConfigurationError("iters must be >= 1")
    n_out, n_in = w.shape
    if not np.any(w):
        return SpectralNorm(0.0, np.zeros(n_out), np.zeros(n_in), zero=True)
    if v0 is None:
        v = np.random.default_rng(0x5EC7).standard_normal(n_in)
    else:
        v = np.array(v0, dtype=np.float64)
    nv = np.linalg.norm(v)
    v = v / nv if nv > 0 else np.full(n_in, 1.0 / np.sqrt(n_in))
    u = np.zeros(n_out)
    sigma = 0.0
    for _ in range(iters):
        wu = w @ v
        sigma = float(np.linalg.norm(wu))
        if sigma == 0.0:
            # start vector in the null space; restart from a dense vector
            v = np.full(n_in, 1.0 / np.sqrt(n_in))
            continue
        u = wu / sigma
        wv = w.T @ u
        v = wv / np.linalg.norm(wv)
    sigma = float(np.linalg.norm(w @ v))
    u = w @ v / sigma
    return SpectralNorm(sigma, u, v)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, nets: dict, extra=None):
    """Write ``<path>.json`` (layer manifest) and ``<path>.bin`` (flat <f8 array).

    ``nets`` maps a name to :class:`MlpParams`; arrays are concatenated in
    name order then declaration order.
    """
    path = Path(path)
    manifest = {"format": "dragen-mlp-checkpoint/1", "nets": [], "extra": extra or {}}
    chunks = []
    for name, p in nets.items():
        manifest["nets"].append(
            {
                "name": name,
                "layer_widths": list(p.spec.layer_widths),
                "activations": list(p.spec.activations),
            }
        )
        chunks.extend(a.ravel() for a in p.arrays())
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(flat.astype("<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    specs = [MlpSpec(tuple(e["layer_widths"]), tuple(e["activations"])) for e in manifest["nets"]]
    need = sum(i * o + o for sp in specs for i, o in zip(sp.layer_widths[:-1], sp.layer_widths[1:]))
    if need != flat.size:
        raise ConfigurationError(f"checkpoint has {flat.size} values, manifest needs {need}")
    nets, pos = {}, 0
    for entry, spec in zip(manifest["nets"], specs):
        ws, bs = [], []
        for n_in, n_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            ws.append(flat[pos : pos + n_in * n_out].reshape(n_out, n_in).copy())
            pos += n_in * n_out
            bs.append(flat[pos : pos + n_out].copy())
            pos += n_out
        nets[entry["name"]] = MlpParams(spec, ws, bs)
    return nets, manifest.get("extra", {})
