"""Layered foreground/background GAN with mutual-information regularisation,
alternate training of a U-Net segmenter, and evaluation metrics."""

__version__ = "0.1.0"
