"""Few-shot image generation from scene graphs via first-order meta-learning."""

__version__ = "0.1.0"
