"""Distributed pose-graph optimization with multilevel partitioning and
accelerated Riemannian block-coordinate descent."""

__version__ = "0.1.0"
