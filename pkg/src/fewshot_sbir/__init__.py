"""Few-shot sketch-to-photo retrieval with a meta-learned, margin-adaptive embedding head."""

__version__ = "0.1.0"
