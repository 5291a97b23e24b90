"""Layer blocks shared by the generators and discriminators.

Every block works on rank-4 ``(batch, channels, height, width)`` tensors and
knows its own shape law through :meth:`output_spec`, so network shapes can be
checked without running a forward pass. All convolutions use "same" zero
padding; stride alone controls the spatial size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


class BlockConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TensorSpec:
    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"TensorSpec.{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def of(cls, t: torch.Tensor) -> "TensorSpec":
        if t.dim() != 4:
            raise ValueError(f"expected a rank-4 tensor, got shape {tuple(t.shape)}")
        return cls(*t.shape)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    leaky_slope: float = LEAKY_SLOPE
    norm: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise BlockConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1:
            raise BlockConfigError("stride and dilation must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise BlockConfigError("channel counts must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise BlockConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    def with_(self, **changes) -> "BlockConfig":
        return replace(self, **changes)


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm2d(channels) if enabled else nn.Identity()


def _check_input(spec: TensorSpec, channels: int, block: str):
    if spec.channels != channels:
        raise BlockConfigError(f"{block} expects {channels} input channels, got {spec.channels}")


class DownsamplingBlock(nn.Module):
    """Strided convolution -> batch norm -> leaky ReLU; halves height and width (ceil)."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        if cfg.stride != 2:
            raise BlockConfigError(f"downsampling block requires stride 2, got {cfg.stride}")
        if cfg.dilation != 1:
            raise BlockConfigError("downsampling block requires dilation 1")
        self.cfg = cfg
        self.conv = nn.Conv2d(cfg.in_channels, cfg.out_channels, cfg.kernel, stride=2,
                              padding=same_padding(cfg.kernel), bias=not cfg.norm)
        self.norm = _norm(cfg.out_channels, cfg.norm)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def output_spec(self, spec: TensorSpec) -> TensorSpec:
        _check_input(spec, self.cfg.in_channels, "DownsamplingBlock")
        return TensorSpec(spec.batch, self.cfg.out_channels,
                          math.ceil(spec.height / 2), math.ceil(spec.width / 2))

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class UpsamplingBlock(nn.Module):
    """Transposed convolution -> batch norm -> leaky ReLU; doubles height and width."""

    def __init__(self, cfg: BlockConfig, bias: bool | None = None):
        super().__init__()
        if cfg.stride != 2:
            raise BlockConfigError(f"upsampling block requires stride 2, got {cfg.stride}")
        if cfg.dilation != 1:
            raise BlockConfigError("upsampling block requires dilation 1")
        pad = same_padding(cfg.kernel)
        # out = 2(H-1) - 2*pad + kernel + output_padding must equal 2H
        output_padding = 2 - cfg.kernel + 2 * pad
        if not 0 <= output_padding < 2:
            raise BlockConfigError(f"kernel {cfg.kernel} cannot produce an exact 2x upsampling")
        self.cfg = cfg
        self.conv = nn.ConvTranspose2d(cfg.in_channels, cfg.out_channels, cfg.kernel, stride=2,
                                       padding=pad, output_padding=output_padding,
                                       bias=(not cfg.norm) if bias is None else bias)
        self.norm = _norm(cfg.out_channels, cfg.norm)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def output_spec(self, spec: TensorSpec) -> TensorSpec:
        _check_input(spec, self.cfg.in_channels, "UpsamplingBlock")
        return TensorSpec(spec.batch, self.cfg.out_channels, 2 * spec.height, 2 * spec.width)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class SeparableConv2d(nn.Module):
    """Depthwise ``k x k`` convolution followed by a pointwise ``1 x 1`` convolution."""

    def __init__(self, channels: int, kernel: int, dilation: int = 1, bias: bool = False):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, kernel, padding=same_padding(kernel, dilation),
                                   dilation=dilation, groups=channels, bias=bias)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=bias)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class ResidualIdentityBlock(nn.Module):
    """Two separable convolutions with an additive identity skip.

    ``sep(dilated) -> BN -> LReLU -> sep -> BN``, then ``LReLU(x + branch)``.
    The generator variant dilates the first convolution; the discriminator
    variant keeps both at dilation 1.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        if cfg.in_channels != cfg.out_channels:
            raise BlockConfigError(
                f"residual identity block needs in_channels == out_channels, "
                f"got {cfg.in_channels} != {cfg.out_channels}")
        if cfg.stride != 1:
            raise BlockConfigError("residual identity block requires stride 1")
        c = cfg.in_channels
        self.cfg = cfg
        self.sep1 = SeparableConv2d(c, cfg.kernel, cfg.dilation, bias=not cfg.norm)
        self.norm1 = _norm(c, cfg.norm)
        self.act1 = nn.LeakyReLU(cfg.leaky_slope)
        self.sep2 = SeparableConv2d(c, cfg.kernel, 1, bias=not cfg.norm)
        self.norm2 = _norm(c, cfg.norm)
        self.act_out = nn.LeakyReLU(cfg.leaky_slope)

    def output_spec(self, spec: TensorSpec) -> TensorSpec:
        _check_input(spec, self.cfg.in_channels, type(self).__name__)
        return spec

    def forward(self, x):
        h = self.act1(self.norm1(self.sep1(x)))
        h = self.norm2(self.sep2(h))
        return self.act_out(x + h)


class SFABlock(nn.Module):
    """Spatial feature aggregation.

    Shallow ("bottom") features are projected to the deep ("top") width by
    ``1x1 conv -> BN -> LReLU``, added to the deep features, and fused with a
    ``3x3 conv -> LReLU``. No resizing happens here; both inputs must already
    share height and width.
    """

    def __init__(self, bottom_channels: int, top_channels: int, leaky_slope: float = LEAKY_SLOPE,
                 norm: bool = True):
        super().__init__()
        self.bottom_channels = bottom_channels
        self.top_channels = top_channels
        self.project = nn.Conv2d(bottom_channels, top_channels, 1, bias=not norm)
        self.norm = _norm(top_channels, norm)
        self.act = nn.LeakyReLU(leaky_slope)
        self.fuse = nn.Conv2d(top_channels, top_channels, 3, padding=1)
        self.act_out = nn.LeakyReLU(leaky_slope)

    def output_spec(self, bottom: TensorSpec, top: TensorSpec) -> TensorSpec:
        _check_sfa_specs(bottom, top)
        if bottom.channels != self.bottom_channels or top.channels != self.top_channels:
            raise BlockConfigError("SFA channel counts do not match the block")
        return top

    def forward(self, bottom, top):
        if bottom.shape[-2:] != top.shape[-2:]:
            raise BlockConfigError(
                f"SFA spatial mismatch: bottom {tuple(bottom.shape[-2:])} vs top {tuple(top.shape[-2:])}")
        merged = top + self.act(self.norm(self.project(bottom)))
        return self.act_out(self.fuse(merged))


def _check_sfa_specs(bottom: TensorSpec, top: TensorSpec):
    if (bottom.height, bottom.width) != (top.height, top.width):
        raise BlockConfigError(
            f"SFA spatial mismatch: bottom {bottom.height}x{bottom.width} vs top {top.height}x{top.width}")
    if bottom.batch != top.batch:
        raise BlockConfigError("SFA batch mismatch")


def make_downsampling_block(cfg: BlockConfig) -> DownsamplingBlock:
    return DownsamplingBlock(cfg)


def make_upsampling_block(cfg: BlockConfig) -> UpsamplingBlock:
    return UpsamplingBlock(cfg)


def make_generator_residual_block(cfg: BlockConfig) -> ResidualIdentityBlock:
    """Generator residual block; pass ``dilation`` in ``cfg`` (default choice is 2)."""
    return ResidualIdentityBlock(cfg)


def make_discriminator_residual_block(cfg: BlockConfig) -> ResidualIdentityBlock:
    """Discriminator residual block; dilation is forced to 1 in both convolutions."""
    return ResidualIdentityBlock(cfg.with_(dilation=1))


def make_sfa_block(bottom: TensorSpec, top: TensorSpec, leaky_slope: float = LEAKY_SLOPE,
                   norm: bool = True) -> SFABlock:
    _check_sfa_specs(bottom, top)
    return SFABlock(bottom.channels, top.channels, leaky_slope=leaky_slope, norm=norm)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return F.leaky_relu(x, slope)
