"""Autoencoder discriminators with per-pixel logits and feature taps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import (
    BlockConfig,
    make_discriminator_residual_block,
    make_downsampling_block,
    make_upsampling_block,
)
from .generators import SpecError


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_size: int
    base_channels: int = 64
    n_down: int = 2
    n_up: int = 2
    n_res: int = 1
    in_channels: int = 4
    norm: bool = True

    def __post_init__(self):
        if self.n_down != self.n_up:
            raise SpecError(f"autoencoder discriminator needs n_down == n_up, got {self.n_down} != {self.n_up}")
        if self.n_down < 1 or self.n_res < 0:
            raise SpecError("need n_down >= 1 and n_res >= 0")
        if min(self.base_channels, self.in_channels, self.input_size) < 1:
            raise SpecError("DiscriminatorSpec sizes must be positive")
        if self.input_size % (2 ** self.n_down):
            raise SpecError(f"input_size {self.input_size} not divisible by 2**n_down = {2 ** self.n_down}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        return cls(**d)


@dataclass
class FeatureTaps:
    """Post-activation outputs of each downsampling (``enc``) and upsampling (``dec``) block."""

    enc: list = field(default_factory=list)
    dec: list = field(default_factory=list)

    @property
    def k_enc(self) -> int:
        return len(self.enc)

    @property
    def k_dec(self) -> int:
        return len(self.dec)

    def detach(self) -> "FeatureTaps":
        return FeatureTaps([t.detach() for t in self.enc], [t.detach() for t in self.dec])


class DiscriminatorOutput(NamedTuple):
    logits: torch.Tensor
    taps: FeatureTaps


class AutoencoderDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        base = spec.base_channels
        enc_widths = [base * 2 ** i for i in range(spec.n_down)]
        self.down = nn.ModuleList()
        prev = spec.in_channels
        for i, width in enumerate(enc_widths):
            # no normalization on the first block
            self.down.append(make_downsampling_block(
                BlockConfig(prev, width, stride=2, norm=spec.norm and i > 0)))
            prev = width
        self.res = nn.Sequential(*[
            make_discriminator_residual_block(BlockConfig(prev, prev, norm=spec.norm))
            for _ in range(spec.n_res)])
        self.up = nn.ModuleList()
        for j in range(spec.n_up):
            width = base * 2 ** max(spec.n_down - 2 - j, 0)
            self.up.append(make_upsampling_block(BlockConfig(prev, width, stride=2, norm=spec.norm)))
            prev = width
        self.head = nn.Conv2d(prev, 1, 1)

    def forward(self, x, y) -> DiscriminatorOutput:
        return self.forward_with_taps(x, y)

    def forward_with_taps(self, x, y) -> DiscriminatorOutput:
        if x.shape[0] != y.shape[0] or x.shape[-2:] != y.shape[-2:]:
            raise SpecError(f"image/segmentation mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        h = torch.cat([x, y], dim=1)
        s = self.spec
        if h.shape[1] != s.in_channels or h.shape[-2:] != (s.input_size, s.input_size):
            raise SpecError(f"expected joint input (B, {s.in_channels}, {s.input_size}, {s.input_size}), "
                            f"got {tuple(h.shape)}")
        taps = FeatureTaps()
        for block in self.down:
            h = block(h)
            taps.enc.append(h)
        h = self.res(h)
        for block in self.up:
            h = block(h)
            taps.dec.append(h)
        return DiscriminatorOutput(self.head(h), taps)


def build_discriminator(spec: DiscriminatorSpec) -> AutoencoderDiscriminator:
    return AutoencoderDiscriminator(spec)


def forward_with_taps(d: AutoencoderDiscriminator, x, y) -> DiscriminatorOutput:
    return d.forward_with_taps(x, y)
