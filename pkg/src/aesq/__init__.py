"""Image aesthetics assessment with learnable queries over frozen image embeddings."""

__version__ = "0.1.0"
