"""
Adversarial, reconstruction and feature-matching losses
=======================================================

Small hand-sized tensors make every loss easy to verify by eye.
"""

import torch

from rvgan.discriminators import FeatureTaps
from rvgan.losses import LossWeights, composite, hinge_d, hinge_g, reconstruction, weighted_feature_matching


def const(v, shape=(1, 2, 4, 4)):
    return torch.full(shape, float(v))


# %%
# Hinge loss for the discriminator is zero once real logits sit above +1
# and fake logits below -1.
for real, fake in [(1.0, -1.0), (0.0, 0.0), (0.5, 0.25)]:
    print(f"hinge_d(real={real}, fake={fake}) = {hinge_d(const(real), const(fake)).item():.3f}")
print("hinge_g(fake=0.5) =", hinge_g(const(0.5)).item())
print("reconstruction(0.5 vs 0) =", reconstruction(const(0.5), const(0.0)).item())

# %%
# Weighted feature matching compares encoder and decoder activations of the
# discriminator separately. Decoder taps get the larger share (0.6 vs 0.4).
real = FeatureTaps([const(0)], [const(0)])
print("encoder differs by 1:", weighted_feature_matching(real, FeatureTaps([const(1)], [const(0)])).item())
print("decoder differs by 1:", weighted_feature_matching(real, FeatureTaps([const(0)], [const(1)])).item())

# %%
# The generator objective adds all three terms with weight 10 each.
bd = composite({"fine": {"adv_d": 0.0, "adv_g": -0.5, "rec": 0.25, "wfm": 0.1}}, LossWeights())
print(bd)
