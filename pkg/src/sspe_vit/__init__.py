"""Vision-Transformer toolkit for selective shuffled position embedding and key-patch exchange."""

__version__ = "0.1.0"
