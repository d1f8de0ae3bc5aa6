"""Factorized variational shape encoding with classification, retrieval and semantic SLAM."""
from . import gradcore, voxeldata, vae, inference, slam, store

__all__ = ["gradcore", "voxeldata", "vae", "inference", "slam", "store"]
__version__ = "0.1.0"
