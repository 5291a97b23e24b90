"""
Cutting images into patches and putting predictions back together
=================================================================

Training uses 128x128 patches with stride 32; inference averages patches
taken at a much finer stride. Pixels no patch reaches are mirror-filled.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from rvgan.data import IMAGE_DIMS, DatasetId, extract_patches, make_grid, patches_per_axis, stitch_predictions
from rvgan.phantoms import phantom_record

# %%
# Patch counts for the three benchmark image sizes at stride 32.
for ds in DatasetId:
    w, h = IMAGE_DIMS[ds]
    rows, cols = patches_per_axis(h, 128, 32), patches_per_axis(w, 128, 32)
    print(f"{ds.value:10s} {w}x{h}: {rows} x {cols} = {rows * cols} patches per image")

# %%
# Cutting the ground truth of a synthetic image into patches and stitching
# them back reproduces it exactly on the covered area.
rec = phantom_record(300, 340, seed=3)
patches, grid = extract_patches(rec, 128, 32)
st = stitch_predictions(patches.vessel.astype(float), grid)
print("covered:", grid.covered_shape, "of", rec.shape)
print("exact on covered area:", np.array_equal(st.confidence[st.covered], rec.vessel_gt[st.covered]))

# %%
# Overlap counts show how much averaging each pixel receives.
fine_grid = make_grid(*rec.shape, 128, 16)
overlap = np.zeros(rec.shape)
for r, c in fine_grid.origins:
    overlap[r:r + 128, c:c + 128] += 1

fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
axes[0].imshow(rec.fundus)
axes[0].set_title("phantom fundus")
axes[1].imshow(st.confidence, cmap="gray")
axes[1].set_title("stitched ground truth")
im = axes[2].imshow(overlap, cmap="viridis")
axes[2].set_title("patches per pixel (stride 16)")
fig.colorbar(im, ax=axes[2])
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("patching.png", dpi=100)
