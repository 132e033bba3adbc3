"""Unified vision-language pre-training on paired images and reports.

A fusion encoder with learnable queries is trained jointly under four
objectives: image-text contrastive alignment, image-text matching,
image-grounded text generation, and text-grounded image generation through a
two-level vector-quantized latent hierarchy.
"""

__version__ = "0.1.0"
