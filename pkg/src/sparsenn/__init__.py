"""Compressed-DNN toolchain: ADMM pruning/quantization and a sparse-aware inference engine."""

__version__ = "0.1.0"
