"""Synthetic rating datasets from a GAN over embedded profiles, plus top-N
benchmarking of six deep collaborative-filtering baselines."""

__version__ = "0.1.0"
