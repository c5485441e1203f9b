"""Desk-scale lab for consolidating timestep-dependent diffusion features
into a single clean-image feature extractor, plus the downstream evaluation
protocols (correspondence PCK, depth/segmentation probes, kNN, noise-variance
analysis) used to measure it."""

__version__ = "0.1.0"
