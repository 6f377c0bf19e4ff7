"""Loss decomposition of time-lagged reconstruction on finite-state data.

Everything here is an empirical mean over one trajectory.  For lag ``tau``
the source frames are ``t = 0 .. N - tau - 1`` and the targets are
``x_{t+tau}``; encodings assign every frame a finite label ``z_t``.

The central table is the lagged conditional mean

    D_tau(z) = mean of x_{t+tau} over frames with z_t = z

from which follow the variance explained ``ve = Var_z D_0(z)``, the
generalized autocorrelation ``G = sqrt(Var_z D_tau(z) / ve)`` and the lower
bound ``ve (1 - G^2) + (var - ve)`` on the reconstruction loss, attained by
the tabular decoder ``f = D_tau``.  Variances are taken about the mean of the
window they are computed on (sources ``t < N - tau`` for ``ve``, targets for
``D_tau`` and ``var``), so a single bin explains exactly nothing.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .features import FeatureTrajectory
from .lattice_msm import PolarGrid, StateTrajectory

__all__ = [
    "DiscretizedEncoding",
    "EncodingEvaluation",
    "UndefinedAutocorrelation",
    "encode_labels",
    "encode_by_state",
    "encode_by_theta_bin",
    "encode_by_r_bin",
    "encode_by_quantile",
    "single_bin",
    "merge_bins",
    "conditional_mean_lagged",
    "variance_explained",
    "generalized_autocorrelation",
    "tae_loss_bound",
    "optimal_encoding_loss",
    "empirical_optimal_decoder_loss",
    "cross_term",
    "evaluate_encoding",
    "latent_variance_fraction",
    "parse_encoding",
]


class UndefinedAutocorrelation(ValueError):
    """The encoding explains no variance, so G is undefined."""


@dataclass(frozen=True)
class DiscretizedEncoding:
    labels: np.ndarray
    n_bins: int
    tag: str = "custom"

    def __len__(self) -> int:
        return self.labels.size


def encode_labels(labels, tag: str = "custom") -> DiscretizedEncoding:
    """Relabel arbitrary integer labels to ``0..B-1`` (in order of first
    appearance in sorted label order), dropping unused labels."""
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    return DiscretizedEncoding(labels=inv.astype(np.int64).ravel(), n_bins=uniq.size, tag=tag)


def _states(trajectory):
    return trajectory.states if isinstance(trajectory, StateTrajectory) else np.asarray(trajectory)


def encode_by_state(trajectory) -> DiscretizedEncoding:
    return encode_labels(_states(trajectory), tag="by-state")


def encode_by_theta_bin(trajectory, grid: PolarGrid, n_bins: int | None = None) -> DiscretizedEncoding:
    n_bins = grid.n_theta if n_bins is None else n_bins
    _, i_t = grid.split_index(_states(trajectory))
    return encode_labels(i_t * n_bins // grid.n_theta, tag=f"by-theta-bin:{n_bins}")


def encode_by_r_bin(trajectory, grid: PolarGrid, n_bins: int | None = None) -> DiscretizedEncoding:
    n_bins = grid.n_r if n_bins is None else n_bins
    i_r, _ = grid.split_index(_states(trajectory))
    return encode_labels(i_r * n_bins // grid.n_r, tag=f"by-r-bin:{n_bins}")


def encode_by_quantile(values, n_bins: int = 200) -> DiscretizedEncoding:
    """Equal-occupancy bins of a 1D latent series.

    Frames with equal values always share a bin.  Each distinct value goes to
    bin ``floor(n_bins * c / N)``, with ``c`` the midpoint of its cumulative
    count, so the labels depend only on the ordering of the values and any
    strictly increasing transform leaves them unchanged.
    """
    values = np.asarray(values, dtype=float).ravel()
    uniq, inv, counts = np.unique(values, return_inverse=True, return_counts=True)
    mid = np.cumsum(counts) - 0.5 * counts
    bins = np.minimum((n_bins * mid / values.size).astype(np.int64), n_bins - 1)
    return encode_labels(bins[inv], tag=f"by-model-output-quantile:{n_bins}")


def single_bin(n_frames: int) -> DiscretizedEncoding:
    return DiscretizedEncoding(labels=np.zeros(n_frames, dtype=np.int64), n_bins=1, tag="single-bin")


def merge_bins(encoding: DiscretizedEncoding, a: int, b: int) -> DiscretizedEncoding:
    labels = np.where(encoding.labels == b, a, encoding.labels)
    return encode_labels(labels, tag=encoding.tag + f"+merge({a},{b})")


def parse_encoding(text: str, trajectory, grid: PolarGrid | None = None) -> DiscretizedEncoding:
    """Parse ``by-state``, ``by-theta-bin[:n]``, ``by-r-bin[:n]`` or ``single-bin``."""
    name, _, arg = text.partition(":")
    n = int(arg) if arg else None
    if name == "by-state":
        return encode_by_state(trajectory)
    if name == "single-bin":
        return single_bin(len(_states(trajectory)))
    if grid is None:
        raise ValueError(f"encoding {text!r} needs a grid")
    if name == "by-theta-bin":
        return encode_by_theta_bin(trajectory, grid, n)
    if name == "by-r-bin":
        return encode_by_r_bin(trajectory, grid, n)
    raise ValueError(f"unknown encoding {text!r}")


# ---------------------------------------------------------------------------


def _frames(features) -> np.ndarray:
    x = features.frames if isinstance(features, FeatureTrajectory) else np.asarray(features, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _check(x, encoding, lag):
    if encoding.labels.size != x.shape[0]:
        raise ValueError("encoding and features differ in length")
    if not 0 <= lag < x.shape[0]:
        raise ValueError("lag must satisfy 0 <= lag < number of frames")


def _binned_means(values: np.ndarray, labels: np.ndarray, n_bins: int):
    counts = np.bincount(labels, minlength=n_bins).astype(float)
    sums = np.column_stack([np.bincount(labels, weights=values[:, j], minlength=n_bins)
                            for j in range(values.shape[1])])
    used = counts > 0
    means = np.zeros_like(sums)
    means[used] = sums[used] / counts[used, None]
    return means, counts


def conditional_mean_lagged(features, encoding: DiscretizedEncoding, lag: int):
    """Table of ``D_tau(z)`` per bin, with the per-bin source counts.

    Bins that occur only in the last ``lag`` frames have count 0 and a zero
    row; they carry no weight in any expectation.
    """
    x = _frames(features)
    _check(x, encoding, lag)
    n = x.shape[0] - lag
    return _binned_means(x[lag:], encoding.labels[:n], encoding.n_bins)


def _spread(table, counts):
    """Occupancy-weighted variance of the rows of a conditional-mean table."""
    w = counts / counts.sum()
    mean = w @ table
    d = table - mean
    return float(np.sum(w * np.sum(d * d, axis=1)))


def _target_variance(x, lag):
    tgt = x[lag:]
    d = tgt - tgt.mean(axis=0)
    return float(np.mean(np.sum(d * d, axis=1)))


def variance_explained(features, encoding: DiscretizedEncoding, lag: int = 0) -> float:
    """Variance of the conditional mean ``xbar(z)`` over the source window
    ``t < N - lag``.

    ``lag`` only sets the window, keeping the result consistent with
    :func:`generalized_autocorrelation` at the same lag.
    """
    x = _frames(features)
    _check(x, encoding, lag)
    n = x.shape[0] - lag
    table, counts = _binned_means(x[:n], encoding.labels[:n], encoding.n_bins)
    return _spread(table, counts)


def generalized_autocorrelation(features, encoding: DiscretizedEncoding, lag: int) -> float:
    """``G(z) = sqrt(Var_z D_tau(z) / Var_z D_0(z))``.

    Raises
    ------
    UndefinedAutocorrelation
        If the variance explained is below 1e-10.
    """
    ve = variance_explained(features, encoding, lag)
    if ve <= 1e-10:
        raise UndefinedAutocorrelation(f"variance explained {ve:.3e} is zero; G is undefined")
    table, counts = conditional_mean_lagged(features, encoding, lag)
    return float(np.sqrt(_spread(table, counts) / ve))


def tae_loss_bound(features, encoding: DiscretizedEncoding, lag: int):
    """Lower bound on the lagged reconstruction loss for this encoding.

    Returns ``(bound, propagation, capacity)`` with ``propagation = ve (1 -
    G^2)`` and ``capacity = var - ve``; ``var`` is the total variance of
    the targets.  With zero variance explained the bound is ``var`` itself.
    """
    x = _frames(features)
    var = _target_variance(x, lag)
    ve = variance_explained(x, encoding, lag)
    if ve <= 1e-10:
        return var, 0.0, var - ve
    g = generalized_autocorrelation(x, encoding, lag)
    propagation = ve * (1.0 - g * g)
    capacity = var - ve
    return propagation + capacity, propagation, capacity


def empirical_optimal_decoder_loss(features, encoding: DiscretizedEncoding, lag: int) -> float:
    """Mean ``|x_{t+tau} - D_tau(z_t)|^2``, computed frame by frame."""
    x = _frames(features)
    table, _ = conditional_mean_lagged(x, encoding, lag)
    n = x.shape[0] - lag
    resid = x[lag:] - table[encoding.labels[:n]]
    return float(np.mean(np.sum(resid * resid, axis=1)))


def optimal_encoding_loss(features, trajectory, lag: int) -> float:
    """Smallest achievable loss: ``var - Var_z D_tau(z)`` for the bijective
    (one label per state) encoding."""
    x = _frames(features)
    enc = encode_by_state(trajectory)
    table, counts = conditional_mean_lagged(x, enc, lag)
    return _target_variance(x, lag) - _spread(table, counts)


def cross_term(features, encoding: DiscretizedEncoding, lag: int, decoder_table) -> float:
    """Mean of ``(x_{t+tau} - D_tau(z_t)) . (D_tau(z_t) - f(z_t))`` for a
    tabular decoder ``f`` given as a ``(n_bins, d)`` array."""
    x = _frames(features)
    table, _ = conditional_mean_lagged(x, encoding, lag)
    n = x.shape[0] - lag
    z = encoding.labels[:n]
    f = np.asarray(decoder_table, dtype=float).reshape(encoding.n_bins, -1)
    return float(np.mean(np.sum((x[lag:] - table[z]) * (table[z] - f[z]), axis=1)))


@dataclass(frozen=True)
class EncodingEvaluation:
    lag: int
    total_variance: float
    variance_explained: float
    generalized_autocorrelation: float | None
    bound: float
    propagation_loss: float
    capacity_loss: float
    empirical_loss: float
    tag: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_encoding(features, encoding: DiscretizedEncoding, lag: int) -> EncodingEvaluation:
    x = _frames(features)
    ve = variance_explained(x, encoding, lag)
    try:
        g = generalized_autocorrelation(x, encoding, lag)
    except UndefinedAutocorrelation:
        g = None
    bound, prop, cap = tae_loss_bound(x, encoding, lag)
    return EncodingEvaluation(lag=lag, total_variance=_target_variance(x, lag), variance_explained=ve,
                              generalized_autocorrelation=g, bound=bound, propagation_loss=prop,
                              capacity_loss=cap, empirical_loss=empirical_optimal_decoder_loss(x, encoding, lag),
                              tag=encoding.tag)


def latent_variance_fraction(latent, encoding: DiscretizedEncoding) -> float:
    """Share of a latent series' variance explained by an encoding,
    ``Var(E[z | bin]) / Var(z)``."""
    z = np.asarray(latent, dtype=float).ravel()
    if z.size != encoding.labels.size:
        raise ValueError("latent and encoding differ in length")
    zc = z - z.mean()
    var = np.mean(zc * zc)
    if var <= 0:
        raise ValueError("latent series has zero variance")
    table, counts = _binned_means(zc[:, None], encoding.labels, encoding.n_bins)
    return _spread(table, counts) / var
