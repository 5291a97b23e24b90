"""
Training the cascade on a single synthetic patch
================================================

A desk-scale model (16 base channels) learns to segment one 128x128
vessel phantom in a few dozen steps on a CPU. The same training step is
used for full-size runs; only widths, data and step counts differ.
"""

import time

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from rvgan.data import normalize
from rvgan.evaluation import to_confidence
from rvgan.generators import forward_cascade
from rvgan.phantoms import vessel_phantom
from rvgan.training import ModelSpecs, TrainConfig, init_state, train_step

fundus, gt, fov = vessel_phantom(128, seed=2, n_vessels=6)
x = torch.from_numpy(normalize(fundus)).permute(2, 0, 1)[None].contiguous()
y = torch.from_numpy(normalize(gt * 255))[None, None]

cfg = TrainConfig(batch_size=1, seed=0)
state = init_state(cfg, ModelSpecs.default(128, base_channels=16))


def predict():
    with torch.no_grad():
        _, fine = forward_cascade(state.g_coarse.eval(), state.g_fine.eval(), x)
    state.g_coarse.train()
    state.g_fine.train()
    return to_confidence(fine[0, 0].numpy())


def dice(conf):
    p = conf > 0.5
    return 2 * np.count_nonzero(p & gt) / (np.count_nonzero(p) + np.count_nonzero(gt))


# %%
# Each step runs two discriminator updates, then one coarse and one fine
# generator update.
t0 = time.perf_counter()
for step in range(1, 81):
    state, losses = train_step(state, (x, y), cfg)
    if step % 20 == 0:
        print(f"step {step:3d}  D {losses.total_d:.3f}  G {losses.total_g:.3f}  "
              f"rec {losses.rec:.3f}  Dice {dice(predict()):.3f}  ({time.perf_counter() - t0:.0f} s)")

# %%
conf = predict()
fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
for ax, img, title in zip(axes, (fundus, gt, conf), ("fundus", "ground truth", "confidence")):
    ax.imshow(img, cmap=None if img.ndim == 3 else "gray")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig("desk_training.png", dpi=100)
