"""
Building blocks and the shape laws they obey
============================================

Each block reports the output shape it will produce before any tensor is
allocated. Here we check those predictions against real forward passes and
look at the parameter savings of the separable residual block.
"""

import torch

from rvgan.blocks import (
    BlockConfig,
    TensorSpec,
    count_parameters,
    make_downsampling_block,
    make_generator_residual_block,
    make_sfa_block,
    make_upsampling_block,
)

torch.manual_seed(0)
x = TensorSpec(1, 64, 128, 128)

# %%
# A stride-2 convolution halves height and width (rounding up), the
# transposed convolution doubles them back.
down = make_downsampling_block(BlockConfig(64, 128, stride=2))
up = make_upsampling_block(BlockConfig(128, 64, stride=2))
mid = down.output_spec(x)
print("down:", x.as_tuple(), "->", mid.as_tuple())
print("up:  ", mid.as_tuple(), "->", up.output_spec(mid).as_tuple())

with torch.no_grad():
    y = up.eval()(down.eval()(torch.randn(x.as_tuple())))
print("actual round trip:", tuple(y.shape))

# %%
# The residual block keeps the shape. Separable convolutions make it far
# cheaper than two dense 3x3 convolutions of the same width.
res = make_generator_residual_block(BlockConfig(128, 128, dilation=2))
c, k = 128, 3
dense = 2 * c * c * k * k + 4 * c
print(f"residual params: {count_parameters(res)} (dense equivalent {dense}, "
      f"{count_parameters(res) / dense:.1%})")

# %%
# The feature-fusion block merges a skip connection into the decoder path
# and takes its channel count from the decoder side.
sfa = make_sfa_block(TensorSpec(1, 32, 64, 64), TensorSpec(1, 128, 64, 64))
with torch.no_grad():
    fused = sfa.eval()(torch.randn(1, 32, 64, 64), torch.randn(1, 128, 64, 64))
print("fused:", tuple(fused.shape))
