"""Adversarial, reconstruction and (weighted) feature matching losses.

All functions take torch tensors and return scalar tensors so they can be
back-propagated. Feature distances are mean absolute differences per tap.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F


class LossShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_enc: float = 0.4
    lambda_dec: float = 0.6
    lambda_adv: float = 10.0
    lambda_rec: float = 10.0
    lambda_wfm: float = 10.0

    def __post_init__(self):
        if not (0.0 <= self.lambda_enc <= 1.0 and 0.0 <= self.lambda_dec <= 1.0):
            raise ValueError("lambda_enc and lambda_dec must lie in [0, 1]")
        if not math.isclose(self.lambda_enc + self.lambda_dec, 1.0, abs_tol=1e-9):
            raise ValueError(f"lambda_enc + lambda_dec must be 1, got {self.lambda_enc + self.lambda_dec}")
        if self.lambda_dec <= self.lambda_enc:
            raise ValueError("decoder features must be weighted above encoder features "
                             f"(lambda_dec={self.lambda_dec} <= lambda_enc={self.lambda_enc})")
        if min(self.lambda_adv, self.lambda_rec, self.lambda_wfm) < 0:
            raise ValueError("outer loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_abs(a, b):
    if a.shape != b.shape:
        raise LossShapeError(f"tap shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def _check_counts(real: Sequence, fake: Sequence):
    if len(real) != len(fake):
        raise LossShapeError(f"tap count mismatch: {len(real)} vs {len(fake)}")


def feature_matching(taps_real: Sequence[torch.Tensor], taps_fake: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average over taps of the per-tap mean absolute difference."""
    _check_counts(taps_real, taps_fake)
    if not taps_real:
        raise LossShapeError("feature matching needs at least one tap")
    return sum(_mean_abs(r, f) for r, f in zip(taps_real, taps_fake)) / len(taps_real)


def weighted_feature_matching(taps_real, taps_fake, w: LossWeights | None = None, *,
                              lambda_enc: float | None = None, lambda_dec: float | None = None) -> torch.Tensor:
    """Encoder and decoder feature distances weighted by ``lambda_enc`` / ``lambda_dec``.

    Each global weight is split uniformly across its taps, i.e. every encoder
    tap carries ``lambda_enc / k_enc``. Explicit ``lambda_enc``/``lambda_dec``
    keywords override ``w`` (useful for the unweighted encoder-only case).
    """
    w = w or LossWeights()
    le = w.lambda_enc if lambda_enc is None else lambda_enc
    ld = w.lambda_dec if lambda_dec is None else lambda_dec
    _check_counts(taps_real.enc, taps_fake.enc)
    _check_counts(taps_real.dec, taps_fake.dec)
    total = taps_real.enc[0].new_zeros(()) if taps_real.enc else taps_real.dec[0].new_zeros(())
    if taps_real.enc:
        k = len(taps_real.enc)
        total = total + sum((le / k) * _mean_abs(r, f) for r, f in zip(taps_real.enc, taps_fake.enc))
    if taps_real.dec:
        k = len(taps_real.dec)
        total = total + sum((ld / k) * _mean_abs(r, f) for r, f in zip(taps_real.dec, taps_fake.dec))
    return total


def hinge_d(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge loss.

    ``-min(0, -1 + r)`` is written as ``relu(1 - r)``; torch's relu has a zero
    subgradient at 0, so logits sitting exactly on the margin get zero gradient.
    """
    if logits_real.shape != logits_fake.shape:
        raise LossShapeError(f"logit shape mismatch: {tuple(logits_real.shape)} vs {tuple(logits_fake.shape)}")
    return F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean()


def hinge_g(logits_fake: torch.Tensor) -> torch.Tensor:
    return -logits_fake.mean()


def reconstruction(g_out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if g_out.shape != y.shape:
        raise LossShapeError(f"reconstruction shape mismatch: {tuple(g_out.shape)} vs {tuple(y.shape)}")
    return ((g_out - y) ** 2).mean()


def generator_objective(adv_g, rec, wfm, w: LossWeights):
    return w.lambda_adv * adv_g + w.lambda_rec * rec + w.lambda_wfm * wfm


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values summed over both scales.

    ``total_g`` is the generator objective, ``total_d`` the discriminator
    hinge loss, and ``total`` their sum (the full composite objective value).
    """

    adv_d: float
    adv_g: float
    rec: float
    wfm: float
    total_g: float
    total_d: float

    @property
    def total(self) -> float:
        return self.total_d + self.total_g

    def as_row(self, step: int) -> dict:
        return {"step": step, "adv_d": self.adv_d, "adv_g": self.adv_g, "rec": self.rec,
                "wfm": self.wfm, "total_g": self.total_g, "total_d": self.total_d}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.adv_d, self.adv_g, self.rec, self.wfm))


PART_NAMES = ("adv_d", "adv_g", "rec", "wfm")


def composite(parts: Mapping[str, Mapping[str, float]], w: LossWeights | None = None) -> LossBreakdown:
    """Combine per-scale loss parts into a :class:`LossBreakdown`.

    ``parts`` maps a scale name (``"fine"``, ``"coarse"``) to a mapping with
    keys ``adv_d``, ``adv_g``, ``rec`` and ``wfm``. Parts are summed over scales.
    """
    w = w or LossWeights()
    if not parts:
        raise ValueError("composite needs at least one scale")
    sums = dict.fromkeys(PART_NAMES, 0.0)
    for scale, p in parts.items():
        missing = [k for k in PART_NAMES if k not in p]
        if missing:
            raise KeyError(f"scale {scale!r} is missing loss parts {missing}")
        for k in PART_NAMES:
            sums[k] += float(p[k])
    total_g = generator_objective(sums["adv_g"], sums["rec"], sums["wfm"], w)
    return LossBreakdown(total_g=total_g, total_d=sums["adv_d"], **sums)
