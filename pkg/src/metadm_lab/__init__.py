"""Few-shot learning with diffusion-generated pseudo-samples.

Prototypical networks trained on episodes whose support sets are widened by
image-to-image diffusion samples: low-strength outputs augment their own
class and higher-strength outputs form extra "fake" classes.
"""

__version__ = "0.1.0"
