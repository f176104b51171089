"""Three-layer recommendation platform: transformer retrieval, multi-task ranking, policy composition."""

__version__ = "0.1.0"
