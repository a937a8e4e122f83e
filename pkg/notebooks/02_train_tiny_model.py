# %% [markdown]
# # Training a tiny denoiser on synthetic speech
#
# Harmonic "voiced" clips mixed with pink noise, a ~5M MACs/s model, and a few
# hundred Adam steps on negative SI-SNR. Takes a couple of minutes on one core.

# %%
import numpy as np

from mptscale import pipeline as P
from mptscale.complexity import plan
from mptscale.evaluation import causality_probe, si_snr
from mptscale.mptnet import forward

data = P.gen_dataset(P.SynthSpec(seed=0, n_clips=200))
train_set, val_set = P.split(data)
print(f"{len(train_set)} training clips, {len(val_set)} held out,"
      f" noisy SI-SNR {P.baseline(val_set):.2f} dB")

# %%
cfg = plan(5e6)
res = P.train(P.TrainRun(cfg, steps=500, val_every=100, seed=0), data)
for step, score in res.history.val:
    print(f"step {step:4d}  validation SI-SNR {score:.2f} dB")

# %% [markdown]
# Loss curve, smoothed over 25 steps.

# %%
loss = np.asarray(res.history.loss)
smooth = np.convolve(loss, np.ones(25) / 25, mode="valid")
print(" ".join(f"{v:.1f}" for v in smooth[::50]))

# %% [markdown]
# Enhance one held-out clip and confirm the trained model is still causal.

# %%
model = P.load_model(cfg, res.best)
noisy, clean = val_set[0]
est, _ = forward(model, noisy)
print(f"clip SI-SNR: noisy {si_snr(noisy, clean):.2f} dB -> enhanced {si_snr(est, clean):.2f} dB")
print(causality_probe(model))
