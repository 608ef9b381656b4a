"""Mutual contrastive low-rank learning for paired-modality slide classification."""

__version__ = "0.1.0"
