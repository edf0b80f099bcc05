"""Spurious correlation and out-of-distribution detection: Gaussian-world theory,
ColorMNIST generation, MLP training objectives, post-hoc OOD scores and metrics."""

__version__ = "0.1.0"
