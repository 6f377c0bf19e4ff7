# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Linear TAE on two independent components
#
# With a linear encoder z = b1 x1 + b2 x2 the optimal loss has a closed
# form. The minimum always sits at a pure component, and which one wins is
# decided by variance times squared autocorrelation, not by autocorrelation
# alone.

# %%
import numpy as np

from slowmode.models import LinearTaeProblem, linear_mixed_loss, linear_tae_closed_form

raw = LinearTaeProblem(var1=1.0, var2=9.0, A1=0.9, A2=0.5)
white = LinearTaeProblem(var1=1.0, var2=1.0, A1=0.9, A2=0.5)
for name, p in (("raw", raw), ("whitened", white)):
    sol = linear_tae_closed_form(p)
    print(f"{name:>9}: slow {sol.loss_slow:.3f}  fast {sol.loss_fast:.3f}  argmin b2 = {sol.argmin_b2}")

# %%
b2 = np.linspace(0, 1, 11)
np.column_stack([b2, linear_mixed_loss(raw, b2), linear_mixed_loss(white, b2)]).round(4)

# %% [markdown]
# Whitening equalizes the variances, so the slow component wins again.
# `slowmode experiment run --preset linear-synthetic` trains both cases.
