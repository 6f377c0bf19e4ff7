# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # The beltway lattice, end to end
#
# Two concentric circular valleys on a polar lattice. Hopping between the
# valleys is the slowest process; travelling around a valley is much faster
# but carries most of the Cartesian variance. This walkthrough builds the
# Markov model, reads off its slow modes, then trains a small SRV on a
# short trajectory.

# %%
import numpy as np

from slowmode.features import featurize_polar, whiten
from slowmode.lattice_msm import PotentialSpec, beltway_grid, build_transition_model, sample_trajectory
from slowmode.models import TrainingConfig, encode, train
from slowmode.spectral import leading_modes, mode_overlap

grid = beltway_grid()
model = build_transition_model(PotentialSpec(), grid, convention=4)
model.n_states

# %% [markdown]
# ## Oracle modes
# The first non-stationary eigenfunction depends on r only; the next two are
# a degenerate sine/cosine pair in theta.

# %%
modes = leading_modes(model, 4)
for i, t in enumerate(modes.timescales, start=1):
    print(f"psi{i}: t = {t:,.1f} steps")

# %%
r, theta = grid.coordinates()
psi1 = modes.eigenfunctions[:, 1].reshape(grid.n_r, grid.n_theta)
print("spread of psi1 across theta at fixed r:", np.ptp(psi1, axis=1).max())

# %% [markdown]
# ## A short trajectory and an SRV
# One million steps and a lag of 1000 keep this cell under a minute.

# %%
traj = sample_trajectory(model, 1_000_000, seed=42)
feats = whiten(featurize_polar(traj, grid))
cfg = TrainingConfig(lag=1000, stride=10, max_epochs=20, patience=5, seed=7)
run = train("srv", feats, cfg)
z = encode(run.spec, run.params, feats)
print("overlap with psi1:", mode_overlap(z, modes.eigenfunctions[:, 1], traj))
print("overlap with psi2:", mode_overlap(z, modes.eigenfunctions[:, 2], traj))

# %% [markdown]
# The full study (all four objectives at lag 3000 on 5M steps) is the
# `beltway-paper` preset:
#
#     slowmode experiment run --preset beltway-paper --out-dir runs/beltway
