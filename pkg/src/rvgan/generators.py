"""Coarse and fine generators and the two-scale cascade."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    BlockConfig,
    TensorSpec,
    UpsamplingBlock,
    make_downsampling_block,
    make_generator_residual_block,
    make_sfa_block,
    make_upsampling_block,
    same_padding,
)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    input_size: int
    base_channels: int = 64
    n_down: int = 2
    n_res: int = 3
    in_channels: int = 3
    out_channels: int = 1
    res_dilation: int = 2
    stem_kernel: int = 7
    norm: bool = True

    def __post_init__(self):
        if min(self.base_channels, self.in_channels, self.out_channels, self.input_size) < 1:
            raise SpecError("GeneratorSpec sizes must be positive")
        if self.n_down < 1 or self.n_res < 0:
            raise SpecError("need n_down >= 1 and n_res >= 0")
        if self.input_size % (2 ** self.n_down):
            raise SpecError(f"input_size {self.input_size} not divisible by 2**n_down = {2 ** self.n_down}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


def check_generator_pair(coarse: GeneratorSpec, fine: GeneratorSpec):
    if fine.input_size != 2 * coarse.input_size:
        raise SpecError(f"fine input_size ({fine.input_size}) must be 2x coarse ({coarse.input_size})")
    if fine.base_channels != coarse.base_channels:
        raise SpecError("coarse and fine generators must share base_channels for the hand-off")


class GeneratorOutput(NamedTuple):
    seg_map: torch.Tensor
    handoff_features: torch.Tensor | None = None


class _GeneratorBody(nn.Module):
    """Encoder-residual-decoder skeleton shared by both scales."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        base, slope = spec.base_channels, 0.2
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, base, spec.stem_kernel, padding=same_padding(spec.stem_kernel)),
            nn.LeakyReLU(slope),
        )
        widths = [base * 2 ** i for i in range(spec.n_down + 1)]
        self.down = nn.ModuleList(
            make_downsampling_block(BlockConfig(widths[i], widths[i + 1], stride=2, norm=spec.norm))
            for i in range(spec.n_down))
        deep = widths[-1]
        self.res = nn.Sequential(*[
            make_generator_residual_block(BlockConfig(deep, deep, dilation=spec.res_dilation, norm=spec.norm))
            for _ in range(spec.n_res)])
        self.up = nn.ModuleList()
        self.sfa = nn.ModuleList()
        for j in range(spec.n_down):
            level = spec.n_down - j - 1
            self.up.append(make_upsampling_block(
                BlockConfig(widths[level + 1], widths[level], stride=2, norm=spec.norm)))
            side = spec.input_size // 2 ** level
            feat = TensorSpec(1, widths[level], side, side)
            self.sfa.append(make_sfa_block(feat, feat, norm=spec.norm))
        self.head = nn.Conv2d(base, spec.out_channels, spec.stem_kernel, padding=same_padding(spec.stem_kernel))

    def _check(self, x):
        s = self.spec
        if x.dim() != 4 or x.shape[1] != s.in_channels or x.shape[-2:] != (s.input_size, s.input_size):
            raise SpecError(f"expected input (B, {s.in_channels}, {s.input_size}, {s.input_size}), "
                            f"got {tuple(x.shape)}")

    def run(self, x, stem_addend=None) -> GeneratorOutput:
        self._check(x)
        h = self.stem(x)
        if stem_addend is not None:
            h = h + stem_addend
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        h = self.res(h)
        for j, (up, sfa) in enumerate(zip(self.up, self.sfa)):
            h = sfa(skips[self.spec.n_down - j - 1], up(h))
        return GeneratorOutput(torch.tanh(self.head(h)), h)


class CoarseGenerator(_GeneratorBody):
    """Half-resolution generator; also returns its last decoder features for the hand-off."""

    def forward(self, x) -> GeneratorOutput:
        return self.run(x)


class FineGenerator(_GeneratorBody):
    """Full-resolution generator.

    The coarse hand-off ``(B, base, S/2, S/2)`` is upsampled 2x by a bias-free,
    normalization-free transposed convolution and added to the stem output,
    so a zero hand-off is exactly a no-op.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__(spec)
        base = spec.base_channels
        self.handoff_up = UpsamplingBlock(BlockConfig(base, base, stride=2, norm=False), bias=False)

    def forward(self, x, handoff=None) -> GeneratorOutput:
        addend = None
        if handoff is not None:
            addend = self.handoff_up(handoff)
            expected = (x.shape[0], self.spec.base_channels, self.spec.input_size, self.spec.input_size)
            if tuple(addend.shape) != expected:
                raise SpecError(f"hand-off shape after upsampling {tuple(addend.shape)} != {expected}")
        out = self.run(x, addend)
        return GeneratorOutput(out.seg_map, None)


def build_coarse_generator(spec: GeneratorSpec) -> CoarseGenerator:
    return CoarseGenerator(spec)


def build_fine_generator(spec: GeneratorSpec) -> FineGenerator:
    return FineGenerator(spec)


def downsample2x(t: torch.Tensor) -> torch.Tensor:
    """2x area downsampling (mean over non-overlapping 2x2 cells)."""
    return F.avg_pool2d(t, 2)


def check_normalized(x: torch.Tensor, name: str = "input"):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if x.abs().max() > 1.0:
        raise ValueError(f"{name} must be normalized to [-1, 1]; max |value| = {x.abs().max().item():.4g}")


def forward_cascade(g_coarse: CoarseGenerator, g_fine: FineGenerator, x_fine: torch.Tensor):
    """Run both generators; returns ``(coarse_map, fine_map)``.

    The coarse generator sees the 2x area-downsampled input.
    """
    check_normalized(x_fine, "x_fine")
    coarse = g_coarse(downsample2x(x_fine))
    fine = g_fine(x_fine, coarse.handoff_features)
    return coarse.seg_map, fine.seg_map
