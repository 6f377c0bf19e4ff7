"""Learning objectives for slow-mode discovery and their training loop.

Four objectives share one pair-based training loop:

``tae``   time-lagged autoencoder, ``mean |D(E(x_t)) - x_{t+tau}|^2``
``srv``   1D state-free reversible VAMPnet, ``-A(E(x_t))``
``mtae``  encoder-only TAE, ``mean (E(x_t) - E(x_{t+tau}))^2 / var(E)``
``vde``   ``lam * tae + (1 - lam) * srv`` (deterministic encoder, no KL term)

The autocorrelation ``A`` uses one mean and one variance pooled over
``z_t`` and ``z_{t+tau}``; with that convention ``mtae == 2 - 2A`` holds
exactly, not only in expectation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .features import FeatureTrajectory, lagged_pairs
from .neural import (Adam, MlpParams, MlpSpec, NonFiniteGradient, backward, encoder_part, forward,
                     init_params, linear_tae_spec, srv_spec, tae_spec)

__all__ = [
    "OBJECTIVES",
    "CollapsedEncoder",
    "TrainingDivergence",
    "TrainingConfig",
    "TrainingRun",
    "VdeConfig",
    "LinearTaeProblem",
    "LinearTaeSolution",
    "autocorrelation",
    "tae_loss",
    "srv_loss",
    "modified_tae_loss",
    "vde_loss",
    "objective_loss_and_grad",
    "default_spec",
    "train",
    "evaluate_objective",
    "encode",
    "linear_mixed_loss",
    "linear_tae_closed_form",
    "two_component_chain",
    "flip_probability",
]

OBJECTIVES = ("tae", "srv", "mtae", "vde")
MIN_VARIANCE = 1e-12


class CollapsedEncoder(ValueError):
    """The latent batch has (numerically) zero variance."""


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, params=None, epoch=None):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


# ---------------------------------------------------------------------------
# losses on explicit maps


def _pooled(z0, z1):
    z0 = np.asarray(z0, dtype=float).ravel()
    z1 = np.asarray(z1, dtype=float).ravel()
    m = 0.5 * (z0.mean() + z1.mean())
    a, b = z0 - m, z1 - m
    var = 0.5 * (np.mean(a * a) + np.mean(b * b))
    if var < MIN_VARIANCE:
        raise CollapsedEncoder(f"latent variance {var:.3e} below {MIN_VARIANCE}")
    return a, b, var


def autocorrelation(z0, z1) -> float:
    """Lagged autocorrelation of paired samples ``(z_t, z_{t+tau})`` with mean
    and variance pooled over both halves."""
    a, b, var = _pooled(z0, z1)
    return float(np.mean(a * b) / var)


def tae_loss(encoder: Callable, decoder: Callable, x0, x1) -> float:
    pred = decoder(encoder(np.asarray(x0, dtype=float)))
    resid = pred - np.asarray(x1, dtype=float)
    return float(np.mean(np.sum(resid * resid, axis=1)))


def srv_loss(encoder: Callable, x0, x1) -> float:
    return -autocorrelation(encoder(np.asarray(x0, dtype=float)), encoder(np.asarray(x1, dtype=float)))


def modified_tae_loss(encoder: Callable, x0, x1) -> float:
    z0 = np.asarray(encoder(np.asarray(x0, dtype=float)), dtype=float).ravel()
    z1 = np.asarray(encoder(np.asarray(x1, dtype=float)), dtype=float).ravel()
    _, _, var = _pooled(z0, z1)
    d = z0 - z1
    return float(np.mean(d * d) / var)


@dataclass(frozen=True)
class VdeConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("VDE mixing parameter must lie in [0, 1]")


def vde_loss(encoder: Callable, decoder: Callable, x0, x1, cfg: VdeConfig = VdeConfig()) -> float:
    if cfg.lam == 1.0:
        return tae_loss(encoder, decoder, x0, x1)
    if cfg.lam == 0.0:
        return srv_loss(encoder, x0, x1)
    return cfg.lam * tae_loss(encoder, decoder, x0, x1) + (1.0 - cfg.lam) * srv_loss(encoder, x0, x1)


# ---------------------------------------------------------------------------
# network objectives with gradients


def _autocorr_grads(z0, z1):
    """``A`` and its gradients w.r.t. ``z0`` and ``z1`` (each ``(n, 1)``).

    The pooled mean drops out of both derivatives because the centered
    samples sum to zero.
    """
    a, b, var = _pooled(z0, z1)
    n = a.size
    cov = np.mean(a * b)
    A = cov / var
    dz0 = (b / var - cov * a / var ** 2) / n
    dz1 = (a / var - cov * b / var ** 2) / n
    return A, var, dz0[:, None], dz1[:, None]


def _add(g1: MlpParams, g2: MlpParams, n_shared: int):
    for l in range(n_shared):
        g1.weights[l] = g1.weights[l] + g2.weights[l]
        g1.biases[l] = g1.biases[l] + g2.biases[l]
    return g1


def objective_loss_and_grad(objective: str, spec: MlpSpec, params: MlpParams, x0, x1, lam: float = 0.5):
    """Batch loss and exact parameter gradients for one objective."""
    if objective == "tae" or (objective == "vde" and lam == 1.0):
        out, cache = forward(spec, params, x0, keep=True)
        resid = out - x1
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        return loss, backward(spec, params, cache, 2.0 * resid / resid.shape[0])

    enc_spec, enc_params = encoder_part(spec, params)
    n_enc = enc_spec.n_layers
    if objective in ("srv", "mtae") or (objective == "vde" and lam == 0.0):
        z0, c0 = forward(enc_spec, enc_params, x0, keep=True)
        z1, c1 = forward(enc_spec, enc_params, x1, keep=True)
        A, var, dz0, dz1 = _autocorr_grads(z0, z1)
        if objective == "mtae":
            d = z0 - z1
            num = np.mean(d * d)
            loss = float(num / var)
            a, b, _ = _pooled(z0, z1)
            n = d.shape[0]
            # d/dz of num/var with var pooled over both halves
            g0 = 2.0 * d / n / var - num / var ** 2 * a[:, None] / n
            g1 = -2.0 * d / n / var - num / var ** 2 * b[:, None] / n
        else:
            loss = -float(A)
            g0, g1 = -dz0, -dz1
        grads = backward(enc_spec, enc_params, c0, g0)
        grads = _add(grads, backward(enc_spec, enc_params, c1, g1), n_enc)
        return loss, _pad(grads, spec)

    if objective == "vde":
        out, cache = forward(spec, params, x0, keep=True)
        z0 = cache.activations[spec.latent_index]
        z1, c1 = forward(enc_spec, enc_params, x1, keep=True)
        A, var, dz0, dz1 = _autocorr_grads(z0, z1)
        resid = out - x1
        rec = float(np.mean(np.sum(resid * resid, axis=1)))
        loss = lam * rec + (1.0 - lam) * (-float(A))
        grads = backward(spec, params, cache, lam * 2.0 * resid / resid.shape[0],
                         inject={spec.latent_index: -(1.0 - lam) * dz0})
        grads = _add(grads, backward(enc_spec, enc_params, c1, -(1.0 - lam) * dz1), n_enc)
        return loss, grads
    raise ValueError(f"unknown objective {objective!r}")


def _pad(enc_grads: MlpParams, spec: MlpSpec) -> MlpParams:
    """Zero gradients for decoder layers when only the encoder is trained."""
    n_enc = len(enc_grads.weights)
    w = list(enc_grads.weights)
    b = list(enc_grads.biases)
    for l in range(n_enc, spec.n_layers):
        w.append(np.zeros((spec.widths[l], spec.widths[l + 1])))
        b.append(np.zeros(spec.widths[l + 1]))
    return MlpParams(w, b)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    lag: int = 3000
    batch_size: int = 1024
    max_epochs: int = 200
    learning_rate: float = 1e-3
    seed: int = 0
    validation_fraction: float = 0.1
    patience: int = 20
    stride: int = 10
    deterministic: bool = True
    lam: float = 0.5
    hidden: int = 50

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("lag must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


@dataclass
class TrainingRun:
    objective: str
    spec: MlpSpec
    params: MlpParams
    final_params: MlpParams
    train_history: list
    validation_history: list
    config: TrainingConfig
    best_epoch: int = 0
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def best_validation(self) -> float:
        return self.validation_history[self.best_epoch]

    def encoder(self, params: MlpParams | None = None):
        enc_spec, enc_params = encoder_part(self.spec, self.params if params is None else params)
        return lambda x: forward(enc_spec, enc_params, x)

    def decoder(self):
        from .neural import decoder_part

        dec_spec, dec_params = decoder_part(self.spec, self.params)
        return lambda z: forward(dec_spec, dec_params, z)

    def summary(self) -> dict:
        return {
            "objective": self.objective,
            "config": asdict(self.config),
            "train_history": list(self.train_history),
            "validation_history": list(self.validation_history),
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            **self.extra,
        }


def default_spec(objective: str, hidden: int = 50, dim: int = 2) -> MlpSpec:
    if objective in ("tae", "vde"):
        return tae_spec(hidden=hidden, dim=dim)
    if objective in ("srv", "mtae"):
        return srv_spec(hidden=hidden, dim=dim)
    if objective == "linear-tae":
        return linear_tae_spec(dim)
    raise ValueError(f"unknown objective {objective!r}")


def _frames(features):
    return features.frames if isinstance(features, FeatureTrajectory) else np.asarray(features, dtype=float)


def encode(spec: MlpSpec, params: MlpParams, features, chunk: int = 200_000) -> np.ndarray:
    """Latent value of every frame, evaluated in chunks."""
    x = _frames(features)
    enc_spec, enc_params = encoder_part(spec, params)
    return np.concatenate([forward(enc_spec, enc_params, x[i:i + chunk])
                           for i in range(0, x.shape[0], chunk)])[:, 0]


def evaluate_objective(objective: str, spec: MlpSpec, params: MlpParams, features, lag: int,
                       index=None, lam: float = 0.5, chunk: int = 200_000) -> float:
    """Objective over a whole pair set (default: every ``t``), with
    full-set statistics for the autocorrelation terms."""
    x = _frames(features)
    t = np.arange(x.shape[0] - lag) if index is None else np.asarray(index)
    if objective in ("tae", "vde"):
        sq = 0.0
        for i in range(0, t.size, chunk):
            tt = t[i:i + chunk]
            r = forward(spec, params, x[tt]) - x[tt + lag]
            sq += float(np.sum(r * r))
        rec = sq / t.size
        if objective == "tae" or lam == 1.0:
            return rec
    z0 = encode(spec, params, x[t], chunk)
    z1 = encode(spec, params, x[t + lag], chunk)
    if objective == "srv" or (objective == "vde" and lam == 0.0):
        return -autocorrelation(z0, z1)
    if objective == "mtae":
        _, _, var = _pooled(z0, z1)
        return float(np.mean((z0 - z1) ** 2) / var)
    if objective == "vde":
        return lam * rec + (1.0 - lam) * (-autocorrelation(z0, z1))
    raise ValueError(f"unknown objective {objective!r}")


def train(objective: str, features, config: TrainingConfig = TrainingConfig(),
          spec: MlpSpec | None = None, params: MlpParams | None = None,
          log: Callable[[str], None] | None = None) -> TrainingRun:
    """Minibatch Adam on lagged pairs with early stopping.

    Pairs ``(t, t + lag)`` are taken every ``stride`` frames; a seeded random
    ``validation_fraction`` of them is held out.  Each epoch reshuffles the
    training pairs (seeded), drops the incomplete last batch, then scores the
    held-out pairs with full-set statistics.  The parameters with the lowest
    validation loss are returned.

    Raises
    ------
    TrainingDivergence
        On a non-finite loss or gradient; carries the last finite parameters.
    """
    if objective not in OBJECTIVES and objective != "linear-tae":
        raise ValueError(f"unknown objective {objective!r}")
    kind = "tae" if objective == "linear-tae" else objective
    x = _frames(features)
    if kind in ("srv", "mtae") and config.batch_size < 1024:
        raise ValueError("autocorrelation objectives need batches of at least 1024 pairs")
    spec = default_spec(objective, config.hidden, x.shape[1]) if spec is None else spec
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng) if params is None else params.copy()
    params.check(spec)

    pairs = lagged_pairs(x.shape[0], config.lag, config.stride)
    t_all = pairs.t
    perm = rng.permutation(t_all.size)
    n_val = max(1, int(round(config.validation_fraction * t_all.size)))
    val_t = np.sort(t_all[perm[:n_val]])
    train_t = t_all[perm[n_val:]]
    if train_t.size < config.batch_size:
        raise ValueError("fewer training pairs than one batch")

    opt = Adam(params, lr=config.learning_rate)
    best = params.copy()
    last_good = params.copy()
    best_val = np.inf
    best_epoch = 0
    train_hist, val_hist = [], []
    stopped = False
    n_batches = train_t.size // config.batch_size
    for epoch in range(config.max_epochs):
        order = train_t[rng.permutation(train_t.size)]
        total = 0.0
        for k in range(n_batches):
            tt = order[k * config.batch_size:(k + 1) * config.batch_size]
            try:
                loss, grads = objective_loss_and_grad(kind, spec, params, x[tt], x[tt + config.lag], config.lam)
                if not np.isfinite(loss):
                    raise NonFiniteGradient("non-finite loss")
                last_good = params.copy()
                opt.step(params, grads)
            except (NonFiniteGradient, CollapsedEncoder) as err:
                raise TrainingDivergence(f"training diverged in epoch {epoch}: {err}",
                                         params=last_good, epoch=epoch) from err
            total += loss
        val = evaluate_objective(kind, spec, params, x, config.lag, index=val_t, lam=config.lam)
        if not np.isfinite(val):
            raise TrainingDivergence(f"non-finite validation loss in epoch {epoch}", params=last_good, epoch=epoch)
        train_hist.append(total / n_batches)
        val_hist.append(val)
        if log is not None:
            log(f"{objective} epoch {epoch:4d} train {train_hist[-1]: .6f} val {val: .6f}")
        if val < best_val:
            best_val, best_epoch, best = val, epoch, params.copy()
        elif epoch - best_epoch >= config.patience:
            stopped = True
            break
    return TrainingRun(objective=objective, spec=spec, params=best, final_params=params,
                       train_history=train_hist, validation_history=val_hist, config=config,
                       best_epoch=best_epoch, stopped_early=stopped)


# ---------------------------------------------------------------------------
# linear TAE on two independent components


@dataclass(frozen=True)
class LinearTaeProblem:
    """Two independent mean-free components with variances and lag-``tau``
    autocorrelations; ``b2`` mixes them into ``z ~ b1 x1 + b2 x2``."""

    var1: float
    var2: float
    A1: float
    A2: float
    b2: float = 0.0

    def __post_init__(self):
        if self.var1 <= 0 or self.var2 <= 0:
            raise ValueError("variances must be positive")
        if abs(self.A1) > 1 or abs(self.A2) > 1:
            raise ValueError("autocorrelations must lie in [-1, 1]")
        if not 0.0 <= self.b2 <= 1.0:
            raise ValueError("b2 must lie in [0, 1]")

    @property
    def total_variance(self) -> float:
        return self.var1 + self.var2


@dataclass(frozen=True)
class LinearTaeSolution:
    c0: float
    c1: float
    loss_slow: float
    loss_fast: float
    loss_at_b2: float
    b2_grid: np.ndarray
    loss_curve: np.ndarray
    argmin_b2: float | None
    min_loss: float
    tie: bool


def linear_mixed_loss(problem: LinearTaeProblem, b2) -> np.ndarray:
    """Minimal loss of a linear TAE whose encoding is ``b1 x1 + b2 x2``,
    piecewise in ``b2`` (pure modes at the endpoints)."""
    p = problem
    b2 = np.asarray(b2, dtype=float)
    s = p.total_variance
    k1 = p.var1 * p.A1 ** 2
    k2 = p.var2 * p.A2 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = s - k1 - p.var2 * (k2 - k1) / ((1.0 / b2 ** 2 - 1.0) * p.var1 + p.var2)
    out = np.where(b2 <= 0.0, s - k1, np.where(b2 >= 1.0, s - k2, mid))
    return out[()] if out.ndim == 0 else out


def linear_tae_closed_form(problem: LinearTaeProblem, n_grid: int = 1001) -> LinearTaeSolution:
    """Optimal linear TAE for two independent components.

    The decoder of a pure mode has ``c0 = 0`` and ``c1 = A`` of that mode;
    the loss over ``b2`` is monotone so the optimum is a pure mode: ``b2 = 0``
    (slow component) when ``var1 A1^2 > var2 A2^2``, ``b2 = 1`` otherwise.
    Equality is reported as a tie with ``argmin_b2 = None``.
    """
    p = problem
    grid = np.linspace(0.0, 1.0, n_grid)
    curve = linear_mixed_loss(p, grid)
    k1 = p.var1 * p.A1 ** 2
    k2 = p.var2 * p.A2 ** 2
    loss_slow = p.total_variance - k1
    loss_fast = p.total_variance - k2
    tie = k1 == k2
    if tie:
        argmin, c1 = None, p.A1
    elif k1 > k2:
        argmin, c1 = 0.0, p.A1
    else:
        argmin, c1 = 1.0, p.A2
    return LinearTaeSolution(c0=0.0, c1=c1, loss_slow=loss_slow, loss_fast=loss_fast,
                             loss_at_b2=float(linear_mixed_loss(p, p.b2)), b2_grid=grid,
                             loss_curve=curve, argmin_b2=argmin, min_loss=min(loss_slow, loss_fast), tie=tie)


def flip_probability(autocorr: float, lag: int) -> float:
    """Per-step flip probability of a symmetric two-state chain whose
    lag-``lag`` autocorrelation ``(1 - 2q)^lag`` equals ``autocorr``."""
    if not 0.0 < autocorr < 1.0:
        raise ValueError("target autocorrelation must lie in (0, 1)")
    return 0.5 * (1.0 - autocorr ** (1.0 / lag))


def two_component_chain(sigmas, autocorrs, lag: int, n_steps: int, seed: int = 0) -> np.ndarray:
    """Features from independent symmetric two-state chains.

    Component ``i`` takes the values ``+-sigma_i`` and flips with
    probability ``flip_probability(A_i, lag)`` per step, so its variance is
    ``sigma_i^2`` and its lag autocorrelation is ``A_i`` (in expectation).
    """
    rng = np.random.default_rng(seed)
    cols = []
    for sigma, A in zip(sigmas, autocorrs):
        q = flip_probability(A, lag)
        flips = rng.random(n_steps) < q
        flips[0] = rng.random() < 0.5
        sign = np.where(np.cumsum(flips) % 2 == 0, 1.0, -1.0)
        cols.append(sigma * sign)
    return np.column_stack(cols)
