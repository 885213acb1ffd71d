"""Video moment retrieval with LLM-derived clip context."""

__version__ = "0.1.0"
