"""Source-free domain adaptation for segmentation by learning from curriculum."""

__version__ = "0.1.0"
