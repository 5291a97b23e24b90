"""Independent oracles shared by the test modules.

Nothing here calls into the code paths it is used to check.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def fd_gradient_check(loss_fn, params, n_checks=3, eps=1e-6, seed=0, min_grad=1e-7, max_tries=400):
    """Compare autograd against central differences on random parameter elements.

    ``loss_fn`` must be a pure float64 scalar function of the current parameter
    values. Returns a list of ``(name, index, backprop, finite_difference, rel_err)``.
    """
    named = [(n, p) for n, p in params if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in named if p.grad is not None}
    rng = np.random.default_rng(seed)
    results = []
    tries = 0
    while len(results) < n_checks and tries < max_tries:
        tries += 1
        name, p = named[rng.integers(len(named))]
        if name not in grads:
            continue
        flat_idx = int(rng.integers(p.numel()))
        bp = float(grads[name].reshape(-1)[flat_idx])
        if abs(bp) < min_grad:
            continue
        with torch.no_grad():
            flat = p.view(-1)
            orig = flat[flat_idx].item()
            flat[flat_idx] = orig + eps
            up = float(loss_fn())
            flat[flat_idx] = orig - eps
            down = float(loss_fn())
            flat[flat_idx] = orig
        fd = (up - down) / (2 * eps)
        rel = abs(fd - bp) / max(abs(fd), abs(bp))
        results.append((name, flat_idx, bp, fd, rel))
    return results


def brute_force_counts(pred, gt, fov):
    tp = fp = fn = tn = 0
    for p, g, f in zip(np.ravel(pred), np.ravel(gt), np.ravel(fov)):
        if not f:
            continue
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def pairwise_auc(scores, labels):
    """Mann-Whitney statistic by explicit enumeration of positive/negative pairs."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def per_class_iou(pred, gt, fov):
    """Mean IoU from set intersections/unions of pixel coordinates."""
    coords = [tuple(c) for c in np.argwhere(np.asarray(fov).astype(bool))]
    ious = []
    for cls in (1, 0):
        p = {c for c in coords if int(pred[c]) == cls}
        g = {c for c in coords if int(gt[c]) == cls}
        union = p | g
        ious.append(len(p & g) / len(union) if union else 1.0)
    return sum(ious) / 2


def direct_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """SSIM by looping over every window and evaluating weighted moments directly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    half = (window - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma ** 2)) for i in range(window)]
    w = np.array([[gi * gj for gj in g] for gi in g])
    w /= w.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def brute_force_stitch(preds, origins, patch_size, shape):
    """Per-pixel mean over every patch whose footprint contains the pixel (NaN if none).

    Works row by row: each row gathers the matching line of every patch that
    spans it, then averages column-wise ignoring gaps.
    """
    h, w = shape
    out = np.full((h, w), np.nan)
    for i in range(h):
        covering = [k for k, (r, _) in enumerate(origins) if r <= i < r + patch_size]
        if not covering:
            continue
        stack = np.full((len(covering), w), np.nan)
        for row, k in enumerate(covering):
            r, c = origins[k]
            stack[row, c:c + patch_size] = preds[k][i - r]
        counts = np.sum(~np.isnan(stack), axis=0)
        sums = np.nansum(stack, axis=0)
        out[i] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return out


def dice(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    return 2 * np.count_nonzero(pred & gt) / (np.count_nonzero(pred) + np.count_nonzero(gt))


def make_drive_tree(root, n_train=5, n_test=2, seed=0):
    """Write a DRIVE-layout tree of full-size synthetic images under ``root``.

    Fundus images are phantoms; masks are the phantom FoV discs.
    """
    from pathlib import Path

    from PIL import Image

    from rvgan.phantoms import phantom_record

    root = Path(root)
    for split, ids in (("training", range(21, 21 + n_train)), ("test", range(1, 1 + n_test))):
        d = root / split
        for sub in ("images", "1st_manual", "mask"):
            (d / sub).mkdir(parents=True, exist_ok=True)
        for i in ids:
            rec = phantom_record(584, 565, seed=seed + i, n_vessels=10)
            stem = f"{i:02d}_{split}"
            Image.fromarray(rec.fundus).save(d / "images" / f"{stem}.tif")
            Image.fromarray(rec.vessel_gt * 255).save(d / "1st_manual" / f"{i:02d}_manual1.gif")
            Image.fromarray(rec.fov_mask * 255).save(d / "mask" / f"{stem}_mask.gif")
    return root


def overfit_smoke(seed=2, n_vessels=6, max_steps=200, every=10, target=0.85, base_channels=16):
    """Fit the desk-scale cascade to a single 128x128 phantom pair.

    Dice of the eval-mode fine output against the phantom's vessels is
    measured every ``every`` steps; stops at the first check reaching
    ``target``. Returns a dict with the Dice history and wall time.
    """
    import time

    from rvgan.data import normalize
    from rvgan.evaluation import to_confidence
    from rvgan.generators import forward_cascade
    from rvgan.phantoms import vessel_phantom
    from rvgan.training import ModelSpecs, TrainConfig, init_state, train_step

    fundus, gt, _ = vessel_phantom(128, seed=seed, n_vessels=n_vessels)
    x = torch.from_numpy(normalize(fundus)).permute(2, 0, 1)[None].contiguous()
    y = torch.from_numpy(normalize(gt * 255))[None, None]
    cfg = TrainConfig(batch_size=1, seed=0)
    state = init_state(cfg, ModelSpecs.default(128, base_channels))
    history = []
    reached = None
    t0 = time.perf_counter()
    for step in range(1, max_steps + 1):
        state, _ = train_step(state, (x, y), cfg)
        if step % every == 0:
            with torch.no_grad():
                _, fine = forward_cascade(state.g_coarse.eval(), state.g_fine.eval(), x)
            state.g_coarse.train()
            state.g_fine.train()
            d = dice(to_confidence(fine[0, 0].numpy()) > 0.5, gt)
            history.append((step, d))
            if d >= target:
                reached = step
                break
    return {"history": history, "reached_step": reached, "seconds": time.perf_counter() - t0,
            "best": max(d for _, d in history)}
