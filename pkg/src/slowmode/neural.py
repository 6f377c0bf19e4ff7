"""A small fully connected network engine in float64 numpy.

Layers compute ``h_{l+1} = act(h_l @ W_l + b_l)`` with ``act`` either
``tanh`` or ``linear``.  Gradients are exact reverse mode; the optimizer is
Adam with bias correction.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "MlpSpec",
    "MlpParams",
    "Cache",
    "Adam",
    "NonFiniteGradient",
    "init_params",
    "forward",
    "backward",
    "tae_spec",
    "srv_spec",
    "linear_tae_spec",
    "encoder_part",
    "decoder_part",
    "save_model",
    "load_model",
]

ACTIVATIONS = ("tanh", "linear")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: ``widths[0]`` inputs, then one activation per layer.

    ``latent_index`` points into ``widths`` at the bottleneck layer whose
    output is the encoding; ``None`` means the whole net is an encoder.
    """

    widths: tuple
    activations: tuple
    latent_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("a network needs at least two layers")
        if min(self.widths) < 1:
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per non-input layer")
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ValueError(f"unknown activations {sorted(bad)}")
        if self.latent_index is not None and not 0 < self.latent_index < len(self.widths) - 1:
            raise ValueError("latent index must be an interior layer")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def encoder_layers(self) -> int:
        return self.n_layers if self.latent_index is None else self.latent_index


def tae_spec(hidden: int = 50, depth: int = 2, dim: int = 2, latent: int = 1) -> MlpSpec:
    """``[dim-hidden*depth-latent-hidden*depth-dim]``: tanh hidden layers,
    linear latent and output."""
    widths = (dim,) + (hidden,) * depth + (latent,) + (hidden,) * depth + (dim,)
    acts = ("tanh",) * depth + ("linear",) + ("tanh",) * depth + ("linear",)
    return MlpSpec(widths, acts, latent_index=depth + 1)


def srv_spec(hidden: int = 50, depth: int = 2, dim: int = 2) -> MlpSpec:
    widths = (dim,) + (hidden,) * depth + (1,)
    return MlpSpec(widths, ("tanh",) * depth + ("linear",))


def linear_tae_spec(dim: int = 2) -> MlpSpec:
    return MlpSpec((dim, 1, dim), ("linear", "linear"), latent_index=1)


@dataclass
class MlpParams:
    weights: list
    biases: list

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vector) -> None:
        pos = 0
        for a in self.arrays():
            a[...] = np.reshape(vector[pos:pos + a.size], a.shape)
            pos += a.size

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def check(self, spec: MlpSpec) -> None:
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (spec.widths[l], spec.widths[l + 1]) or b.shape != (spec.widths[l + 1],):
                raise ValueError(f"parameter shapes of layer {l} do not match the architecture")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"non-finite parameters in layer {l}")


def init_params(spec: MlpSpec, seed: int | np.random.Generator | None = 0) -> MlpParams:
    """Fan-in scaled uniform weights, ``U(-sqrt(3/fan_in), sqrt(3/fan_in))``,
    and zero biases, so each pre-activation has unit variance for unit-variance
    uncorrelated inputs."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _sub(spec: MlpSpec, params: MlpParams, lo: int, hi: int):
    sub = MlpSpec(spec.widths[lo:hi + 1], spec.activations[lo:hi])
    return sub, MlpParams(params.weights[lo:hi], params.biases[lo:hi])


def encoder_part(spec: MlpSpec, params: MlpParams):
    """Sub-network from the input to the latent layer (shares arrays)."""
    return _sub(spec, params, 0, spec.encoder_layers)


def decoder_part(spec: MlpSpec, params: MlpParams):
    if spec.latent_index is None:
        raise ValueError("network has no decoder")
    return _sub(spec, params, spec.latent_index, spec.n_layers)


@dataclass
class Cache:
    activations: list
    param_ids: tuple = field(default=())


def forward(spec: MlpSpec, params: MlpParams, x, keep: bool = False):
    """Evaluate the network on a batch ``x`` of shape ``(n, widths[0])``.

    With ``keep=True`` returns ``(output, cache)`` for :func:`backward`.
    """
    h = np.asarray(x, dtype=float)
    if h.ndim != 2 or h.shape[1] != spec.widths[0]:
        raise ValueError(f"expected input of shape (n, {spec.widths[0]}), got {h.shape}")
    acts = [h]
    for w, b, act in zip(params.weights, params.biases, spec.activations):
        h = h @ w + b
        if act == "tanh":
            h = np.tanh(h)
        acts.append(h)
    if keep:
        return h, Cache(acts, tuple(id(w) for w in params.weights))
    return h


def backward(spec: MlpSpec, params: MlpParams, cache: Cache, grad_out, inject=None) -> MlpParams:
    """Reverse-mode gradients of a batch loss.

    ``grad_out`` is dL/d(output); ``inject`` optionally maps a layer index of
    ``widths`` to an extra dL/d(activation) at that layer (e.g. a loss term on
    the latent encoding).  Returns gradients with the layout of ``params``.
    """
    if cache.param_ids != tuple(id(w) for w in params.weights) or len(cache.activations) != spec.n_layers + 1:
        raise ValueError("cache does not belong to these parameters")
    grad = np.asarray(grad_out, dtype=float)
    if grad.shape != cache.activations[-1].shape:
        raise ValueError("output gradient shape does not match the cached batch")
    inject = inject or {}
    g_w = [None] * spec.n_layers
    g_b = [None] * spec.n_layers
    for l in range(spec.n_layers - 1, -1, -1):
        if (l + 1) in inject:
            grad = grad + inject[l + 1]
        out = cache.activations[l + 1]
        if spec.activations[l] == "tanh":
            grad = grad * (1.0 - out * out)
        g_w[l] = cache.activations[l].T @ grad
        g_b[l] = grad.sum(axis=0)
        if l:
            grad = grad @ params.weights[l].T
    return MlpParams(g_w, g_b)


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction; defaults ``lr=1e-3, betas=(0.9, 0.999),
    eps=1e-8``.  Updates parameters in place."""

    def __init__(self, params: MlpParams, lr: float = 1e-3, betas: Sequence[float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: MlpParams, grads: MlpParams) -> MlpParams:
        garrays = grads.arrays()
        for g in garrays:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient; aborting optimization")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params.arrays(), garrays, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


# ---------------------------------------------------------------------------
# model file


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(float)


def model_to_dict(spec: MlpSpec, params: MlpParams) -> dict:
    return {
        "version": 1,
        "spec": {"widths": list(spec.widths), "activations": list(spec.activations),
                 "latent_index": spec.latent_index},
        "layers": [{"weight_shape": list(w.shape), "weight": _b64(w), "bias": _b64(b)}
                   for w, b in zip(params.weights, params.biases)],
    }


def model_from_dict(doc: dict):
    if doc.get("version") != 1:
        raise ValueError("unsupported model file version")
    s = doc["spec"]
    spec = MlpSpec(tuple(s["widths"]), tuple(s["activations"]), s["latent_index"])
    weights = [_unb64(l["weight"], l["weight_shape"]) for l in doc["layers"]]
    biases = [_unb64(l["bias"], (l["weight_shape"][1],)) for l in doc["layers"]]
    params = MlpParams(weights, biases)
    params.check(spec)
    return spec, params


def save_model(spec: MlpSpec, params: MlpParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(spec, params), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
