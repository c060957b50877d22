"""Multi-view structural convolution network for domain-robust point-cloud classification."""

__version__ = "0.1.0"
