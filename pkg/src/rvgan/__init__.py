"""Multi-scale GAN for retinal vessel segmentation.

Two generators (coarse at half resolution, fine at full resolution) are
trained against two autoencoder discriminators that emit per-pixel logits.
The generator objective combines a hinge adversarial term, mean squared
reconstruction error and a feature matching loss that weights discriminator
decoder features above encoder features.
"""

__version__ = "0.1.0"

from .blocks import BlockConfig, TensorSpec
from .discriminators import DiscriminatorSpec, FeatureTaps, build_discriminator
from .generators import GeneratorSpec, build_coarse_generator, build_fine_generator, forward_cascade
from .losses import (
    LossBreakdown,
    LossWeights,
    composite,
    feature_matching,
    hinge_d,
    hinge_g,
    reconstruction,
    weighted_feature_matching,
)
from .training import ModelSpecs, TrainConfig, train, train_step

__all__ = [
    "BlockConfig", "TensorSpec", "DiscriminatorSpec", "FeatureTaps", "build_discriminator",
    "GeneratorSpec", "build_coarse_generator", "build_fine_generator", "forward_cascade",
    "LossBreakdown", "LossWeights", "composite", "feature_matching", "hinge_d", "hinge_g",
    "reconstruction", "weighted_feature_matching", "ModelSpecs", "TrainConfig", "train", "train_step",
]
