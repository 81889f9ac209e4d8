"""Triplet-trained toy ViT retrieval with pairwise transformer reranking."""

__version__ = "0.1.0"
