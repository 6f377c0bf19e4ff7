"""Lattice potentials with their Markov state models; trajectory sampling.

Two built-in potentials are provided:

* ``beltway``: two concentric circular valleys separated by a ring barrier,
  defined in polar coordinates on ``[r_min, r_max] x [0, 2pi)``.
* ``torus-surrogate``: a two-dihedral periodic potential on ``[0, 2pi)^2``
  whose first angle hops more slowly than the second.

States live on a :class:`PolarGrid`. The first axis (``r``, or the slow
dihedral on the torus) may be bounded or periodic, the second axis (``theta``)
is always periodic. State index is ``radial_index * n_theta + angular_index``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numba
import numpy as np
import scipy.sparse as sp

TWO_PI = 2.0 * np.pi

__all__ = [
    "PotentialSpec",
    "PolarGrid",
    "TransitionModel",
    "StateTrajectory",
    "DomainError",
    "evaluate_potential",
    "beltway_grid",
    "torus_grid",
    "build_transition_model",
    "transition_model_from_energies",
    "stationary_from_energies",
    "sample_trajectory",
    "save_transition_model",
    "load_transition_model",
    "save_trajectory",
    "load_trajectory",
    "trajectory_to_csv",
]


class DomainError(ValueError):
    """Raised when a coordinate lies outside the declared potential domain."""


@dataclass(frozen=True)
class PotentialSpec:
    """Parameters of a built-in lattice potential (energies in kBT).

    For ``kind="beltway"`` the radial profile is zero inside the two valley
    bands ``|r - r1| < dr`` and ``|r - r2| < dr``, ``barrier_height`` strictly
    between them, and a linear wall ``wall_offset + wall_slope * (|r-r1| +
    |r-r2|)`` everywhere else.  For ``kind="torus-surrogate"`` the energy is
    ``barrier_phi * (1 - cos 2phi)/2 + barrier_psi * (1 - cos 2psi)/2``.
    """

    kind: str = "beltway"
    r1: float = 0.7
    r2: float = 0.9
    dr: float = 0.05
    barrier_height: float = 4.0
    wall_offset: float = 1.25
    wall_slope: float = 7.5
    r_min: float = 0.6
    r_max: float = 1.0
    barrier_phi: float = 5.0
    barrier_psi: float = 2.5

    def __post_init__(self):
        if self.kind not in ("beltway", "torus-surrogate"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "beltway":
            if not self.r1 < self.r2:
                raise ValueError("r1 must be smaller than r2")
            if not self.dr > 0:
                raise ValueError("dr must be positive")
            if not self.r1 + self.dr < self.r2 - self.dr:
                raise ValueError("valley bands overlap: need r1 + dr < r2 - dr")
            if not self.r_min < self.r_max:
                raise ValueError("r_min must be smaller than r_max")
        heights = (self.barrier_height, self.wall_offset, self.barrier_phi, self.barrier_psi)
        if min(heights) < 0:
            raise ValueError("barrier heights must be non-negative")

    @property
    def domain(self) -> tuple[float, float]:
        if self.kind == "beltway":
            return (self.r_min, self.r_max)
        return (0.0, TWO_PI)


def evaluate_potential(spec: PotentialSpec, r, theta):
    """Evaluate the potential at polar (or dihedral) coordinates.

    ``theta`` is wrapped to ``[0, 2pi)``.  For the torus surrogate ``r`` plays
    the role of the first (slow) dihedral and is wrapped as well.

    Raises
    ------
    DomainError
        If a beltway radius lies outside ``[r_min, r_max]``.
    """
    r = np.asarray(r, dtype=float)
    theta = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    if spec.kind == "torus-surrogate":
        phi = np.mod(r, TWO_PI)
        out = (spec.barrier_phi * (1.0 - np.cos(2.0 * phi)) / 2.0
               + spec.barrier_psi * (1.0 - np.cos(2.0 * theta)) / 2.0)
        return out[()] if out.ndim == 0 else out

    if np.any((r < spec.r_min) | (r > spec.r_max)):
        raise DomainError(f"radius outside [{spec.r_min}, {spec.r_max}]")
    lo1, hi1 = spec.r1 - spec.dr, spec.r1 + spec.dr
    lo2, hi2 = spec.r2 - spec.dr, spec.r2 + spec.dr
    valley = ((lo1 < r) & (r < hi1)) | ((lo2 < r) & (r < hi2))
    barrier = (hi1 < r) & (r < lo2)
    wall = spec.wall_offset + spec.wall_slope * (np.abs(r - spec.r1) + np.abs(r - spec.r2))
    out = np.where(valley, 0.0, np.where(barrier, spec.barrier_height, wall))
    out = out + 0.0 * theta  # broadcast against theta
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class PolarGrid:
    """Discretization of a two-axis configuration space into lattice states.

    ``placement="nodes"`` puts the states at evenly spaced grid nodes: on a
    bounded axis these include both endpoints (``numpy.linspace``), on a
    periodic axis they are ``min + k * span / n``.  ``placement="centers"``
    uses the midpoints of ``n`` equal-width bins.  The theta axis always spans
    ``[0, 2pi)`` and is periodic.
    """

    n_r: int = 20
    n_theta: int = 200
    r_min: float = 0.6
    r_max: float = 1.0
    r_periodic: bool = False
    placement: str = "nodes"

    def __post_init__(self):
        if self.n_r < 2 or self.n_theta < 2:
            raise ValueError("grid needs at least 2 bins per axis")
        if not self.r_max > self.r_min:
            raise ValueError("r_max must exceed r_min")
        if self.placement not in ("nodes", "centers"):
            raise ValueError(f"unknown placement {self.placement!r}")

    @property
    def n_states(self) -> int:
        return self.n_r * self.n_theta

    @property
    def r_width(self) -> float:
        return (self.r_max - self.r_min) / self.n_r

    @property
    def theta_width(self) -> float:
        return TWO_PI / self.n_theta

    @property
    def r_values(self) -> np.ndarray:
        span = self.r_max - self.r_min
        if self.placement == "centers":
            return self.r_min + (np.arange(self.n_r) + 0.5) * span / self.n_r
        if self.r_periodic:
            return self.r_min + np.arange(self.n_r) * span / self.n_r
        return np.linspace(self.r_min, self.r_max, self.n_r)

    @property
    def theta_values(self) -> np.ndarray:
        if self.placement == "centers":
            return (np.arange(self.n_theta) + 0.5) * self.theta_width
        return np.arange(self.n_theta) * self.theta_width

    def state_index(self, i_r, i_theta):
        return np.asarray(i_r) * self.n_theta + np.asarray(i_theta)

    def split_index(self, state):
        state = np.asarray(state)
        return state // self.n_theta, state % self.n_theta

    def coordinates(self, states=None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(r, theta)`` of the given states (all states by default)."""
        if states is None:
            states = np.arange(self.n_states)
        i_r, i_t = self.split_index(states)
        return self.r_values[i_r], self.theta_values[i_t]


def beltway_grid(n_r: int = 20, n_theta: int = 200, placement: str = "nodes") -> PolarGrid:
    return PolarGrid(n_r=n_r, n_theta=n_theta, r_min=0.6, r_max=1.0,
                     r_periodic=False, placement=placement)


def torus_grid(n: int = 50) -> PolarGrid:
    """Periodic ``n x n`` dihedral grid; axis 0 is phi, axis 1 is psi."""
    return PolarGrid(n_r=n, n_theta=n, r_min=0.0, r_max=TWO_PI,
                     r_periodic=True, placement="nodes")


_OFFSETS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)),
}


def _lattice_neighbors(grid: PolarGrid, convention: int) -> tuple[np.ndarray, np.ndarray]:
    """Directed (source, target) neighbor pairs, excluding self-loops."""
    if convention not in _OFFSETS:
        raise ValueError("neighbor convention must be 4 or 8")
    i_r, i_t = np.divmod(np.arange(grid.n_states), grid.n_theta)
    src, dst = [], []
    for d_r, d_t in _OFFSETS[convention]:
        j_r = i_r + d_r
        if grid.r_periodic:
            j_r = np.mod(j_r, grid.n_r)
            ok = np.ones_like(j_r, dtype=bool)
        else:
            ok = (j_r >= 0) & (j_r < grid.n_r)
        j_t = np.mod(i_t + d_t, grid.n_theta)
        src.append(np.flatnonzero(ok))
        dst.append((j_r * grid.n_theta + j_t)[ok])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    # tiny periodic axes (n=2) can make two offsets hit the same neighbor
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return pairs[:, 0], pairs[:, 1]


@dataclass(frozen=True)
class TransitionModel:
    """Row-stochastic, reversible MSM transition matrix.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        ``p_ij``; every row contains its diagonal entry.
    stationary : ndarray
        Stationary distribution ``pi``.
    energies : ndarray
        State energies in kBT.
    normalizers : ndarray
        ``C_i`` such that ``p_ij = C_i exp(-(V_j - V_i))``.
    convention : int
        Neighbor convention (4 or 8), or 0 for an explicit adjacency.
    grid : PolarGrid or None
    """

    matrix: sp.csr_matrix
    stationary: np.ndarray
    energies: np.ndarray
    normalizers: np.ndarray
    convention: int = 4
    grid: PolarGrid | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def check_reversible(self, tol: float = 1e-10) -> float:
        """Return max ``|pi_i p_ij - pi_j p_ji|`` and raise if above ``tol``."""
        flux = sp.diags(self.stationary) @ self.matrix
        err = abs(flux - flux.T).max() if flux.nnz else 0.0
        if err > tol:
            raise ValueError(f"transition model violates detailed balance (max flux error {err:.3e})")
        return float(err)


def stationary_from_energies(energies: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Closed-form stationary distribution, ``pi_i ~ exp(-2 V_i) / C_i``.

    With ``1 / C_i = sum_j exp(-(V_j - V_i))`` this is
    ``pi_i ~ exp(-V_i) * sum_{j in N(i) + i} exp(-V_j)``.
    """
    energies = np.asarray(energies, dtype=float)
    shift = energies.min()
    boltz = np.exp(-(energies - shift))
    mass = boltz.copy()
    np.add.at(mass, src, boltz[dst])
    pi = boltz * mass
    return pi / pi.sum()


def transition_model_from_energies(energies, src, dst, *, convention: int = 0,
                                   grid: PolarGrid | None = None) -> TransitionModel:
    """Build ``p_ij = C_i exp(-(V_j - V_i))`` over a symmetric adjacency.

    ``src``/``dst`` list directed neighbor pairs (each undirected edge in both
    directions, no self-loops).  The self-transition weight ``exp(0) = 1`` is
    added for every state.
    """
    energies = np.asarray(energies, dtype=float)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    n = energies.size
    rows = np.concatenate([np.arange(n), src])
    cols = np.concatenate([np.arange(n), dst])
    weights = np.concatenate([np.ones(n), np.exp(-(energies[dst] - energies[src]))])
    totals = np.bincount(rows, weights=weights, minlength=n)
    matrix = sp.csr_matrix((weights / totals[rows], (rows, cols)), shape=(n, n))
    matrix.sort_indices()
    pi = stationary_from_energies(energies, src, dst)
    return TransitionModel(matrix=matrix, stationary=pi, energies=energies,
                           normalizers=1.0 / totals, convention=convention, grid=grid)


PotentialLike = Union[PotentialSpec, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def build_transition_model(spec: PotentialLike, grid: PolarGrid | None = None,
                           convention: int = 4) -> TransitionModel:
    """Discretize a potential on ``grid`` and build its MSM.

    ``spec`` is a :class:`PotentialSpec` or any callable ``V(r, theta)``
    returning energies in kBT (the plug-in hook).  Energies are evaluated at
    the grid's state coordinates.
    """
    if grid is None:
        if not isinstance(spec, PotentialSpec):
            raise ValueError("a grid is required for custom potentials")
        grid = torus_grid() if spec.kind == "torus-surrogate" else beltway_grid()
    if isinstance(spec, PotentialSpec) and spec.kind == "beltway":
        if grid.r_min < spec.r_min - 1e-12 or grid.r_max > spec.r_max + 1e-12:
            raise DomainError("grid extends beyond the potential's radial domain")
    r, theta = grid.coordinates()
    if isinstance(spec, PotentialSpec):
        energies = evaluate_potential(spec, r, theta)
    else:
        energies = np.asarray(spec(r, theta), dtype=float)
    src, dst = _lattice_neighbors(grid, convention)
    model = transition_model_from_energies(energies, src, dst, convention=convention, grid=grid)
    meta = {"potential": spec.__dict__.copy() if isinstance(spec, PotentialSpec) else "custom"}
    return TransitionModel(matrix=model.matrix, stationary=model.stationary,
                           energies=model.energies, normalizers=model.normalizers,
                           convention=convention, grid=grid, meta=meta)


@dataclass(frozen=True)
class StateTrajectory:
    states: np.ndarray
    seed: int | None = None
    n_states: int | None = None

    @property
    def n_steps(self) -> int:
        return int(self.states.size)

    def __len__(self) -> int:
        return self.n_steps


@numba.njit(cache=True)
def _walk(indptr, indices, cumprob, uniforms, state, out):
    for t in range(uniforms.size):
        out[t] = state
        lo = indptr[state]
        hi = indptr[state + 1]
        u = uniforms[t]
        nxt = indices[hi - 1]
        for k in range(lo, hi):
            if u < cumprob[k]:
                nxt = indices[k]
                break
        state = nxt
    return state


_CHUNK = 1 << 20


def sample_trajectory(model: TransitionModel, n_steps: int, seed: int | None = None,
                      start: int = 0) -> StateTrajectory:
    """Sample a state trajectory of ``n_steps`` frames starting at ``start``.

    Random numbers come from numpy's ``PCG64`` bit generator seeded with
    ``seed``; uniforms are drawn with ``Generator.random`` in chunks of 2**20
    and consumed one per step (inverse-CDF over the row in column order), so a
    given seed yields the same trajectory on every platform.
    """
    if not 0 <= start < model.n_states:
        raise ValueError("start state out of range")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    m = model.matrix
    cumprob = np.empty_like(m.data)
    for i in range(model.n_states):
        lo, hi = m.indptr[i], m.indptr[i + 1]
        cumprob[lo:hi] = np.cumsum(m.data[lo:hi])
    rng = np.random.Generator(np.random.PCG64(seed))
    states = np.empty(n_steps, dtype=np.int64)
    state = int(start)
    for lo in range(0, n_steps, _CHUNK):
        hi = min(lo + _CHUNK, n_steps)
        state = _walk(m.indptr.astype(np.int64), m.indices.astype(np.int64), cumprob,
                      rng.random(hi - lo), state, states[lo:hi])
    return StateTrajectory(states=states, seed=seed, n_states=model.n_states)


# ---------------------------------------------------------------------------
# file formats

_TRAJ_MAGIC = b"SMTRAJ\x00\x00"
_TRAJ_HEADER = struct.Struct("<8sIIQQ")  # magic, version, n_states, n_steps, seed
_NO_SEED = 2**64 - 1


def save_trajectory(traj: StateTrajectory, path) -> None:
    """Write the binary trajectory format.

    Layout (little-endian): 8-byte magic ``SMTRAJ\\0\\0``, uint32 version (1),
    uint32 n_states, uint64 n_steps, uint64 seed (``2**64-1`` when unseeded),
    then ``n_steps`` packed uint32 state indices.
    """
    n_states = traj.n_states if traj.n_states is not None else int(traj.states.max()) + 1
    seed = _NO_SEED if traj.seed is None else int(traj.seed)
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(_TRAJ_MAGIC, 1, n_states, traj.n_steps, seed))
        fh.write(np.asarray(traj.states, dtype="<u4").tobytes())


def load_trajectory(path) -> StateTrajectory:
    with open(path, "rb") as fh:
        head = fh.read(_TRAJ_HEADER.size)
        magic, version, n_states, n_steps, seed = _TRAJ_HEADER.unpack(head)
        if magic != _TRAJ_MAGIC or version != 1:
            raise ValueError(f"{path}: not a version-1 trajectory file")
        states = np.frombuffer(fh.read(4 * n_steps), dtype="<u4").astype(np.int64)
    if states.size != n_steps:
        raise ValueError(f"{path}: truncated trajectory ({states.size} of {n_steps} frames)")
    return StateTrajectory(states=states, seed=None if seed == _NO_SEED else seed,
                           n_states=n_states)


def trajectory_to_csv(traj: StateTrajectory, path) -> None:
    np.savetxt(path, traj.states, fmt="%d", header="state", comments="")


def save_transition_model(model: TransitionModel, path) -> None:
    """Store the model as an ``.npz`` archive (written to any file name)."""
    import json

    grid = model.grid.__dict__ if model.grid is not None else None
    meta = json.dumps({"convention": model.convention, "grid": grid, "meta": model.meta})
    m = model.matrix
    with open(path, "wb") as fh:
        np.savez(fh, indptr=m.indptr, indices=m.indices, data=m.data,
                 stationary=model.stationary, energies=model.energies,
                 normalizers=model.normalizers, meta=np.frombuffer(meta.encode(), dtype=np.uint8))


def load_transition_model(path) -> TransitionModel:
    import json

    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        n = z["stationary"].size
        matrix = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=(n, n))
        grid = PolarGrid(**meta["grid"]) if meta["grid"] else None
        return TransitionModel(matrix=matrix, stationary=z["stationary"].copy(),
                               energies=z["energies"].copy(), normalizers=z["normalizers"].copy(),
                               convention=meta["convention"], grid=grid, meta=meta["meta"])
