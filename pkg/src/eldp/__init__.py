"""Element-level differential privacy: distances, mechanisms, accounting and private SGD."""

__version__ = "0.1.0"
