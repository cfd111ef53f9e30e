"""Desk-scale cardiac MR synthesis toolkit.

Pipeline stages: parametric phantom generation, geometric preprocessing,
a convolutional beta-VAE over one-hot label maps, latent-space label
deformation (slice upsampling, subject morphing, pathology sampling with
correlated draws), SPADE-conditioned image rendering, and segmentation
training/evaluation to quantify the synthetic data's augmentation value.
"""

__version__ = "0.1.0"
