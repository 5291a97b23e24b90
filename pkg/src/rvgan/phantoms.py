"""Synthetic fundus-like images with known vessel maps, for tests and demos."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import DatasetId, ImageRecord


def vessel_phantom(size: int = 128, seed: int = 0, n_vessels: int = 6,
                   fov_radius: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(fundus_rgb_uint8, vessel_gt, fov_mask)``.

    Vessels are random smooth curves of width 1-4 px drawn darker than a
    reddish background inside a circular field of view.
    """
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    r = fov_radius if fov_radius is not None else 0.48 * size
    fov = ((yy - h / 2 + 0.5) ** 2 + (xx - w / 2 + 0.5) ** 2 <= r ** 2).astype(np.uint8)
    gt = np.zeros((h, w), dtype=bool)
    for _ in range(n_vessels):
        t = np.linspace(0, 1, 4 * size)
        p0 = rng.uniform(0, size, 2)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.6, 1.2) * size
        bend = rng.uniform(-0.4, 0.4) * size
        direction = np.array([np.cos(angle), np.sin(angle)])
        normal = np.array([-direction[1], direction[0]])
        pts = p0 + np.outer(t, direction * length) + np.outer(np.sin(np.pi * t) * bend, normal)
        line = np.zeros((h, w), dtype=bool)
        rows = np.clip(np.round(pts[:, 1]).astype(int), 0, h - 1)
        cols = np.clip(np.round(pts[:, 0]).astype(int), 0, w - 1)
        line[rows, cols] = True
        width = int(rng.integers(0, 2))
        if width:
            line = ndimage.binary_dilation(line, iterations=width)
        gt |= line
    gt &= fov.astype(bool)
    shade = 0.75 + 0.25 * np.exp(-((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / (2 * (0.6 * size) ** 2))
    base = np.stack([200 * shade, 90 * shade, 40 * shade], axis=-1)
    base[gt] *= 0.45
    base += rng.normal(0, 4, base.shape)
    base *= fov[..., None]
    fundus = np.clip(np.rint(base), 0, 255).astype(np.uint8)
    return fundus, gt.astype(np.uint8), fov


def phantom_record(height: int, width: int, seed: int = 0, dataset_id: DatasetId = DatasetId.DRIVE,
                   image_id: str | None = None, n_vessels: int = 12) -> ImageRecord:
    """Full-size phantom record of arbitrary dimensions."""
    size = max(height, width)
    fundus, gt, fov = vessel_phantom(size, seed, n_vessels=n_vessels)
    return ImageRecord(fundus[:height, :width].copy(), gt[:height, :width].copy(), fov[:height, :width].copy(),
                       DatasetId(dataset_id), image_id or f"phantom_{seed:03d}")
