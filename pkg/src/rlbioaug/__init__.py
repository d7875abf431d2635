"""Reinforcement-learned augmentation selection for contrastive learning on 1D biosignals."""

__version__ = "0.1.0"
