"""Multimodal affect recognition with RBM-pretrained deep autoencoders."""

__version__ = "0.1.0"
