"""Two-class peer/target conditional style-based GAN for few-shot image generation."""

__version__ = "0.1.0"
