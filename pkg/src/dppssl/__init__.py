"""Multi-modal contrastive self-supervised training with diverse positive pairs."""

__version__ = "0.1.0"
