"""Unsupervised optical flow under adverse weather, desk scale.

Subpackages: autodiff (tensor core), flowops (warping / metrics), networks,
losses, sampling (contrastive patches), datasynth (scenes + file formats),
training (staged protocol), cli.
"""

__version__ = "0.1.0"
