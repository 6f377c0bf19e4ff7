"""Exact slow modes of a reversible transition matrix.

By detailed balance ``S = Pi^{1/2} P Pi^{-1/2}`` is symmetric, so the leading
eigenpairs of ``P`` follow from a symmetric eigenproblem.  Small models are
diagonalized densely; larger ones go through a Lanczos iteration with full
reorthogonalization that locks one converged eigenvector per round and
restarts from a fresh random vector deflated against everything locked so far.
Restarting from a random vector is what picks up the second member of an
exactly degenerate pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lattice_msm import StateTrajectory, TransitionModel

__all__ = [
    "SpectralModes",
    "ConvergenceError",
    "leading_modes",
    "implied_timescales",
    "mode_overlap",
    "lanczos_top",
]

DENSE_LIMIT = 512


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual norm {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SpectralModes:
    """Leading eigenpairs of a transition matrix.

    ``eigenfunctions[:, i]`` is the right eigenvector ``psi_i`` on states,
    normalized so that ``sum_s pi_s psi_i(s) psi_j(s) = delta_ij``.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    stationary: np.ndarray

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def timescales(self) -> np.ndarray:
        """Implied timescales of the non-stationary modes (index 1 onward)."""
        return implied_timescales(self.eigenvalues)


def implied_timescales(eigenvalues) -> np.ndarray:
    """``t_i = -1 / ln(lambda_i)`` in MSM steps.

    Eigenvalues equal to one (within 1e-12) are the stationary mode and are
    dropped from the returned array.
    """
    lam = np.atleast_1d(np.asarray(eigenvalues, dtype=float))
    lam = lam[np.abs(lam - 1.0) > 1e-12]
    if np.any(lam <= 0.0):
        raise ValueError("non-positive eigenvalue has no implied timescale")
    if np.any(lam > 1.0):
        raise ValueError("eigenvalue above one has no implied timescale")
    return -1.0 / np.log(lam)


def lanczos_top(matvec, n: int, k: int, *, locked=None, rng=None, max_basis: int = 800,
                tol: float = 1e-11, max_sweeps: int = 10_000):
    """Largest ``k`` eigenpairs of a symmetric operator given by ``matvec``.

    ``locked`` holds orthonormal columns that are already known eigenvectors;
    they are projected out of every Krylov vector (deflation).  Each round
    extends a Krylov basis until the top Ritz pair has residual below ``tol``
    (or its value stops changing to 1e-12 relative), then locks it.

    Returns
    -------
    values : (k,) ndarray, vectors : (n, k) ndarray
        Sorted descending; the ``locked`` inputs are not part of the output.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    basis_locked = np.zeros((n, 0)) if locked is None else np.asarray(locked, dtype=float)
    found_vals, found_vecs = [], []
    sweeps = 0

    def deflate(v, extra):
        for _ in range(2):
            if basis_locked.shape[1]:
                v = v - basis_locked @ (basis_locked.T @ v)
            if extra.shape[1]:
                v = v - extra @ (extra.T @ v)
        return v

    start = None
    prev = np.nan
    while len(found_vals) < k:
        fixed = np.column_stack(found_vecs) if found_vecs else np.zeros((n, 0))
        m_max = min(max_basis, n - basis_locked.shape[1] - fixed.shape[1])
        if m_max <= 0:
            raise ConvergenceError("operator exhausted before k modes were found", np.inf)
        q = deflate(rng.standard_normal(n) if start is None else start, fixed)
        q /= np.linalg.norm(q)
        Q = np.zeros((n, m_max))
        alpha = np.zeros(m_max)
        beta = np.zeros(m_max)
        m = 0
        while m < m_max:
            Q[:, m] = q
            w = deflate(matvec(q), fixed)
            alpha[m] = q @ w
            w -= Q[:, : m + 1] @ (Q[:, : m + 1].T @ w)
            w -= Q[:, : m + 1] @ (Q[:, : m + 1].T @ w)
            w = deflate(w, fixed)
            b = np.linalg.norm(w)
            beta[m] = b
            m += 1
            sweeps += 1
            if b < 1e-13 * max(1.0, abs(alpha[m - 1])):
                break  # invariant subspace reached
            if m % 10 == 0:
                T = np.diag(alpha[:m]) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
                evals, evecs = np.linalg.eigh(T)
                if abs(b * evecs[-1, -1]) < 0.1 * tol:
                    break
            q = w / b
        T = np.diag(alpha[:m]) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
        evals, evecs = np.linalg.eigh(T)
        theta = evals[-1]
        y = deflate(Q[:, :m] @ evecs[:, -1], fixed)
        y /= np.linalg.norm(y)
        theta = y @ deflate(matvec(y), fixed)
        resid = np.linalg.norm(deflate(matvec(y), fixed) - theta * y)
        settled = np.isfinite(prev) and abs(theta - prev) <= 1e-12 * abs(theta)
        prev = theta
        if resid < tol or (settled and resid < 1e3 * tol):
            found_vals.append(theta)
            found_vecs.append(y)
            start, prev = None, np.nan
            continue
        if sweeps >= max_sweeps:
            raise ConvergenceError("Lanczos did not converge", resid)
        start = y  # explicit restart from the current Ritz vector

    values = np.array(found_vals)
    vectors = np.column_stack(found_vecs)
    # Rayleigh-Ritz over the locked set fixes any ordering slips
    H = vectors.T @ np.column_stack([matvec(v) for v in vectors.T])
    evals, evecs = np.linalg.eigh(0.5 * (H + H.T))
    order = np.argsort(evals)[::-1]
    return evals[order], vectors @ evecs[:, order]


def _symmetrized(model: TransitionModel):
    pi = model.stationary
    sq = np.sqrt(pi)
    S = sp.diags(sq) @ model.matrix @ sp.diags(1.0 / sq)
    return S.tocsr(), sq


def _fix_sign(psi: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Sign convention for eigenfunctions.

    Each mode is oriented so that its pi-weighted inner product with the
    centered state-index ramp ``s - mean(s)`` is positive.  When that inner
    product vanishes (to 1e-10 relative), the entry of largest magnitude (the
    first one, on ties) is made positive instead.
    """
    n = psi.shape[0]
    ramp = np.arange(n) - (n - 1) / 2.0
    out = psi.copy()
    for i in range(psi.shape[1]):
        v = psi[:, i]
        dot = np.sum(pi * v * ramp)
        scale = np.sqrt(np.sum(pi * v * v)) * np.abs(ramp).max()
        if abs(dot) > 1e-10 * scale:
            sign = np.sign(dot)
        else:
            sign = np.sign(v[np.argmax(np.abs(v))])
        out[:, i] = sign * v
    return out


def leading_modes(model: TransitionModel, k: int, method: str = "auto",
                  seed: int = 0) -> SpectralModes:
    """Top ``k`` eigenvalues and pi-orthonormal eigenfunctions of ``P``.

    Mode 0 is the stationary mode (``lambda_0 = 1``, ``psi_0 = 1``).  ``method``
    is ``"dense"``, ``"lanczos"`` or ``"auto"`` (dense up to 512 states).
    Degenerate eigenvectors come back in an arbitrary rotation within their
    eigenspace.

    Raises
    ------
    ValueError
        If the model violates detailed balance or ``k`` is out of range.
    ConvergenceError
        If the iterative solver misses its residual target.
    """
    n = model.n_states
    if not 1 <= k <= n:
        raise ValueError("k must be between 1 and n_states")
    model.check_reversible()
    S, sq = _symmetrized(model)
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "lanczos"
    if method == "dense":
        Sd = S.toarray()
        evals, evecs = np.linalg.eigh(0.5 * (Sd + Sd.T))
        order = np.argsort(evals)[::-1][:k]
        values, vectors = evals[order], evecs[:, order]
    elif method == "lanczos":
        top = sq / np.linalg.norm(sq)
        rng = np.random.default_rng(seed)
        if k > 1:
            vals, vecs = lanczos_top(lambda v: S @ v, n, k - 1, locked=top[:, None], rng=rng)
            values = np.concatenate([[top @ (S @ top)], vals])
            vectors = np.column_stack([top, vecs])
        else:
            values, vectors = np.array([top @ (S @ top)]), top[:, None]
    else:
        raise ValueError(f"unknown method {method!r}")

    psi = vectors / sq[:, None]
    norms = np.sqrt(np.sum(model.stationary[:, None] * psi ** 2, axis=0))
    psi = _fix_sign(psi / norms, model.stationary)
    return SpectralModes(eigenvalues=values, eigenfunctions=psi, stationary=model.stationary)


def mode_overlap(learned, oracle_mode, trajectory: StateTrajectory | np.ndarray) -> float:
    """Absolute Pearson correlation between a learned latent series and an
    oracle eigenfunction evaluated along the same trajectory."""
    states = trajectory.states if isinstance(trajectory, StateTrajectory) else np.asarray(trajectory)
    a = np.asarray(learned, dtype=float).ravel()
    b = np.asarray(oracle_mode, dtype=float)[states]
    if a.size != b.size:
        raise ValueError("learned series and trajectory differ in length")
    a = a - a.mean()
    b = b - b.mean()
    va, vb = np.dot(a, a), np.dot(b, b)
    if va <= 1e-300 * a.size or vb <= 1e-300 * b.size or np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("zero-variance input to mode_overlap")
    return float(min(1.0, abs(np.dot(a, b)) / np.sqrt(va * vb)))
