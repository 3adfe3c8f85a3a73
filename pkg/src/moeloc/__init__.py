"""Mixture-of-experts scene coordinate regression with splat rendering.

The library trains a bank of per-region coordinate regressors behind a
gating network, localizes query images via PnP-RANSAC over the predicted
2D-3D correspondences, and feeds the predicted point maps into a
feed-forward Gaussian-splat head for single-view rendering.
"""

__version__ = "0.1.0"
