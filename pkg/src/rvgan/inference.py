"""Patch-wise inference with overlap averaging."""

from __future__ import annotations

import numpy as np
import torch

from .data import PATCH_SIZE, TEST_STRIDE, Stitched, cut_patches, make_grid, normalize, stitch_predictions
from .evaluation import to_confidence
from .generators import CoarseGenerator, FineGenerator, forward_cascade


@torch.no_grad()
def predict_patches(g_coarse: CoarseGenerator, g_fine: FineGenerator, x: torch.Tensor,
                    batch_size: int = 64) -> np.ndarray:
    """Fine-generator maps in [-1, 1] for normalized patches ``(N, 3, p, p)``."""
    g_coarse.eval()
    g_fine.eval()
    outs = []
    for start in range(0, len(x), batch_size):
        _, fine = forward_cascade(g_coarse, g_fine, x[start:start + batch_size])
        outs.append(fine[:, 0].cpu().numpy())
    return np.concatenate(outs) if outs else np.empty((0,) + tuple(x.shape[-2:]), dtype=np.float32)


def predict_image(g_coarse: CoarseGenerator, g_fine: FineGenerator, fundus: np.ndarray,
                  stride: int = TEST_STRIDE, patch_size: int = PATCH_SIZE, batch_size: int = 64) -> Stitched:
    """Full-size confidence map in [0, 1] for an RGB uint8 fundus image.

    Patches are streamed in batches so memory stays bounded at small strides.
    """
    h, w = fundus.shape[:2]
    grid = make_grid(h, w, patch_size, stride)
    preds = np.empty((len(grid), patch_size, patch_size), dtype=np.float32)
    g_coarse.eval()
    g_fine.eval()
    chunk = max(batch_size, 1)
    for start in range(0, len(grid), chunk):
        sub = type(grid)(patch_size, stride, grid.source_shape, grid.origins[start:start + chunk])
        patches = cut_patches(fundus, sub)
        x = torch.from_numpy(normalize(patches)).permute(0, 3, 1, 2).contiguous()
        preds[start:start + len(sub)] = predict_patches(g_coarse, g_fine, x, batch_size)
    stitched = stitch_predictions(to_confidence(preds), grid)
    return stitched
