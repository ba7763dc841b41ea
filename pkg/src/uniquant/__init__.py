"""Uniform, binary-coding and unified weight quantization."""

__version__ = "0.1.0"
