# %% [markdown]
# # Quality against compute
#
# Fit SI-SNR against log2 MACs/s, first on the published reference lines and
# then on desk-scale models trained here. The desk-scale slope is only
# expected to be positive; its value is not comparable to full-scale training.

# %%
import numpy as np

from mptscale import pipeline as P
from mptscale.evaluation import fit_scaling

grid = [50e6, 102e6, 195e6, 301e6, 502e6, 1e9, 14e9]
ref = fit_scaling([(x, 0.36 * np.log2(x) + 13.87) for x in grid])
print(f"reference line: {ref.slope:.3f} dB per doubling, intercept {ref.intercept:.2f}")

# %% [markdown]
# Three budgets spanning 16x, 300 steps each (about 10 minutes). The
# acceptance suite uses 1000 steps.

# %%
res = P.run_scaling_experiment([5e6, 2e7, 8e7], P.SynthSpec(seed=0), steps=300)
for (macs, score), cfg in zip(res.points, res.configs):
    print(f"{macs / 1e6:6.1f}M MACs/s  K={cfg.K} B={cfg.B} E={cfg.E}  SI-SNR {score:.2f} dB")
print(f"fitted slope {res.fit.slope:.3f} dB per doubling, r2 {res.fit.r2:.3f}")
