# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Two angles on a torus
#
# A periodic two-angle lattice with a high barrier along phi (slow) and a
# lower one along psi (fast). The ring features wind one angle around a
# circle and encode the other in the circle's radius. Which angle the TAE
# picks depends on that choice; the SRV always picks the slow one.

# %%
from slowmode.features import RingFeatureSpec, ring_features_for_states, whiten
from slowmode.lattice_msm import PotentialSpec, build_transition_model, sample_trajectory, torus_grid
from slowmode.pipeline import mode_axes
from slowmode.spectral import leading_modes

grid = torus_grid(50)
model = build_transition_model(PotentialSpec(kind="torus-surrogate", barrier_phi=5.0, barrier_psi=2.5), grid)
modes = leading_modes(model, 6)
for label, t in zip(mode_axes(modes, grid, ("phi", "psi"))[1:], modes.timescales):
    print(f"{label:>6}: {t:,.1f} steps")

# %%
traj = sample_trajectory(model, 1_000_000, seed=42)
for mode in ("slow-on-radius", "fast-on-radius"):
    x = whiten(ring_features_for_states(traj.states, grid, RingFeatureSpec(mode=mode)))
    print(mode, "feature variance per axis:", x.frames.var(axis=0).round(3))

# %% [markdown]
# Full training runs live in the presets:
#
#     slowmode experiment run --preset torus-eq17 --out-dir runs/eq17
#     slowmode experiment run --preset torus-eq18 --out-dir runs/eq18
