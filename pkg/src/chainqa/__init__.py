"""Extractive QA with chained multi-step inference, reranking, and ensembling."""

__version__ = "0.1.0"
