"""Small-data multi-label image classification with mixup, confidence tempering and self-training."""

__version__ = "0.1.0"
