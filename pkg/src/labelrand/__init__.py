"""Label differential privacy: randomizers, priors, multi-stage training and SGD."""

__version__ = "0.1.0"
