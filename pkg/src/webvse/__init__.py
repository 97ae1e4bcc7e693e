"""Joint image/sentence/tag embeddings with web image-tag adaptation, in numpy."""

__version__ = "0.1.0"
