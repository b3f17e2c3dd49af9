"""Patch-token point-cloud transformer with text-aligned features.

Subpackages: tensor (autodiff core), geometry (FPS/patching/augment),
liftproj (multi-view feature lifting), model (encoder + heads), training
(two-stage losses and optimizer loop), inference (zero-shot segmentation),
metrics (mIoU/cIoU/PCA colors), dataio (formats + synthetic data), cli.
"""

__version__ = "0.1.0"
