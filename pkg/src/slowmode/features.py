"""Feature time series: featurization, whitening, ring features, lag pairs."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .lattice_msm import PolarGrid, StateTrajectory

TWO_PI = 2.0 * np.pi

__all__ = [
    "FeatureTrajectory",
    "WhiteningTransform",
    "SingularCovarianceError",
    "RingFeatureSpec",
    "LaggedPairSet",
    "featurize_polar",
    "featurize_states",
    "center",
    "fit_whitening",
    "apply_whitening",
    "whiten",
    "engineer_ring_features",
    "ring_features_for_states",
    "lagged_pairs",
    "save_features",
    "load_features",
    "features_to_csv",
]


class SingularCovarianceError(ValueError):
    def __init__(self, direction, condition):
        super().__init__(
            f"feature covariance is singular (condition number {condition:.3e}); "
            f"degenerate direction {np.round(direction, 6).tolist()}")
        self.direction = direction
        self.condition = condition


@dataclass(frozen=True)
class WhiteningTransform:
    """Affine map ``y = (x - mean) @ W`` with symmetric ``W = Cov^{-1/2}``."""

    mean: np.ndarray
    matrix: np.ndarray
    inverse: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) @ self.matrix

    def invert(self, y):
        return np.asarray(y, dtype=float) @ self.inverse + self.mean


@dataclass(frozen=True)
class FeatureTrajectory:
    """An ``(N, d)`` feature series plus the preprocessing applied to it.

    ``provenance`` is one of ``raw``, ``beltway-cartesian`` or
    ``ring-engineered``; ``mean`` and ``whitening`` record what was removed.
    """

    frames: np.ndarray
    provenance: str = "raw"
    mean: np.ndarray | None = None
    whitening: WhiteningTransform | None = None

    @property
    def centered(self) -> bool:
        return self.mean is not None

    @property
    def whitened(self) -> bool:
        return self.whitening is not None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self) -> int:
        return self.n_frames

    def total_variance(self) -> float:
        x = self.frames - self.frames.mean(axis=0)
        return float(np.mean(np.sum(x * x, axis=1)))


def featurize_states(states, grid: PolarGrid) -> np.ndarray:
    """Cartesian ``(r cos theta, r sin theta)`` of state coordinates."""
    r, theta = grid.coordinates(np.asarray(states))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def featurize_polar(trajectory: StateTrajectory, grid: PolarGrid,
                    jitter: bool = False, seed: int | None = None) -> FeatureTrajectory:
    """Map a state trajectory to Cartesian features of its bin coordinates.

    With ``jitter=True`` each frame's ``(r, theta)`` is displaced uniformly
    within its bin before conversion (seeded), for robustness experiments.
    """
    states = trajectory.states if isinstance(trajectory, StateTrajectory) else np.asarray(trajectory)
    if states.size and (states.min() < 0 or states.max() >= grid.n_states):
        raise ValueError("state index outside the grid")
    if not jitter:
        return FeatureTrajectory(featurize_states(states, grid), provenance="beltway-cartesian")
    r, theta = grid.coordinates(states)
    rng = np.random.default_rng(seed)
    r = r + (rng.random(r.size) - 0.5) * grid.r_width
    theta = theta + (rng.random(theta.size) - 0.5) * grid.theta_width
    return FeatureTrajectory(np.column_stack([r * np.cos(theta), r * np.sin(theta)]),
                             provenance="beltway-cartesian")


def center(features: FeatureTrajectory) -> FeatureTrajectory:
    mean = features.frames.mean(axis=0)
    return replace(features, frames=features.frames - mean, mean=mean)


def fit_whitening(features, max_condition: float = 1e12) -> WhiteningTransform:
    """Fit a ZCA whitening transform (population covariance, ``1/N``).

    Raises
    ------
    SingularCovarianceError
        If the covariance condition number exceeds ``max_condition``; the
        error carries the eigenvector of the smallest eigenvalue.
    """
    x = features.frames if isinstance(features, FeatureTrajectory) else np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("whitening needs at least two frames of 2D data")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    cond = np.inf if evals[0] <= 0 else evals[-1] / evals[0]
    if not cond < max_condition:
        raise SingularCovarianceError(evecs[:, 0], cond)
    W = (evecs / np.sqrt(evals)) @ evecs.T
    W_inv = (evecs * np.sqrt(evals)) @ evecs.T
    return WhiteningTransform(mean=mean, matrix=0.5 * (W + W.T), inverse=0.5 * (W_inv + W_inv.T))


def apply_whitening(features: FeatureTrajectory, transform: WhiteningTransform) -> FeatureTrajectory:
    return replace(features, frames=transform.apply(features.frames),
                   mean=transform.mean, whitening=transform)


def whiten(features: FeatureTrajectory) -> FeatureTrajectory:
    return apply_whitening(features, fit_whitening(features))


@dataclass(frozen=True)
class RingFeatureSpec:
    """Winding one angle onto the radius of a ring drawn by the other.

    ``mode="slow-on-radius"``: ``r = r0 + dr * ((phi - offset) mod 2pi)`` and
    the ring angle is psi.  ``mode="fast-on-radius"``: ``r = r0 + dr * ((psi +
    offset) mod 2pi)`` and the ring angle is phi.
    """

    r0: float = 1.0
    dr: float = 0.02
    offset: float = 2.0
    mode: str = "slow-on-radius"

    def __post_init__(self):
        if self.mode not in ("slow-on-radius", "fast-on-radius"):
            raise ValueError(f"unknown ring mode {self.mode!r}")
        if not (self.r0 > 0 and self.dr > 0):
            raise ValueError("r0 and dr must be positive")
        if not self.dr * TWO_PI < self.r0:
            raise ValueError("winding must be small compared with the ring radius")


def engineer_ring_features(phi_series, psi_series, spec: RingFeatureSpec = RingFeatureSpec()) -> FeatureTrajectory:
    """Ring features from two angle series (radians); ``mod`` lands in ``[0, 2pi)``."""
    phi = np.asarray(phi_series, dtype=float)
    psi = np.asarray(psi_series, dtype=float)
    if spec.mode == "slow-on-radius":
        r = spec.r0 + spec.dr * np.mod(phi - spec.offset, TWO_PI)
        angle = psi
    else:
        r = spec.r0 + spec.dr * np.mod(psi + spec.offset, TWO_PI)
        angle = phi
    return FeatureTrajectory(np.column_stack([r * np.cos(angle), r * np.sin(angle)]),
                             provenance="ring-engineered")


def ring_features_for_states(states, grid: PolarGrid, spec: RingFeatureSpec = RingFeatureSpec()) -> FeatureTrajectory:
    """Ring features of torus states (grid axis 0 is phi, axis 1 is psi)."""
    phi, psi = grid.coordinates(np.asarray(states))
    return engineer_ring_features(phi, psi, spec)


@dataclass(frozen=True)
class LaggedPairSet:
    lag: int
    stride: int
    n_frames: int

    @property
    def count(self) -> int:
        return (self.n_frames - self.lag - 1) // self.stride + 1

    @property
    def t(self) -> np.ndarray:
        return np.arange(0, self.n_frames - self.lag, self.stride)

    @property
    def t_lagged(self) -> np.ndarray:
        return self.t + self.lag

    def __len__(self) -> int:
        return self.count


def lagged_pairs(features, lag: int, stride: int = 1) -> LaggedPairSet:
    """Index pairs ``(t, t + lag)`` for ``t = 0, stride, 2 stride, ...``.

    ``lag = 0`` gives the plain autoencoder pairing ``(t, t)``.
    """
    n = len(features) if not isinstance(features, int) else features
    if lag < 0:
        raise ValueError("lag must be non-negative")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if lag >= n:
        raise ValueError(f"lag {lag} leaves no pairs in a trajectory of {n} frames")
    return LaggedPairSet(lag=lag, stride=stride, n_frames=n)


# ---------------------------------------------------------------------------
# file format

_FEAT_MAGIC = b"SMFEAT\x00\x00"
_FEAT_HEADER = struct.Struct("<8sIIQ")  # magic, version, n_cols, n_rows


def save_features(features: FeatureTrajectory, path) -> None:
    """Binary feature file: 8-byte magic ``SMFEAT\\0\\0``, uint32 version (1),
    uint32 column count, uint64 row count, then row-major little-endian
    float64 values."""
    x = np.ascontiguousarray(features.frames, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(_FEAT_MAGIC, 1, x.shape[1], x.shape[0]))
        fh.write(x.tobytes())


def load_features(path, provenance: str = "raw") -> FeatureTrajectory:
    with open(path, "rb") as fh:
        magic, version, n_cols, n_rows = _FEAT_HEADER.unpack(fh.read(_FEAT_HEADER.size))
        if magic != _FEAT_MAGIC or version != 1:
            raise ValueError(f"{path}: not a version-1 feature file")
        x = np.frombuffer(fh.read(8 * n_cols * n_rows), dtype="<f8")
    if x.size != n_cols * n_rows:
        raise ValueError(f"{path}: truncated feature file")
    return FeatureTrajectory(x.reshape(n_rows, n_cols).astype(float), provenance=provenance)


def features_to_csv(features: FeatureTrajectory, path) -> None:
    header = ",".join(f"x{i + 1}" for i in range(features.frames.shape[1]))
    np.savetxt(path, features.frames, delimiter=",", header=header, comments="", fmt="%.17g")
