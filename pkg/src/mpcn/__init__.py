"""Two-path convolutional image classifier on numpy: wavelet-based
complexity scoring, complexity-banded dataset splits, a bilateral-filtered
second input path, a deterministic SGD training harness, and the ``mpcn``
command-line front end."""

__version__ = "0.1.0"
