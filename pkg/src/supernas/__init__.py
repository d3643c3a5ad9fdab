"""Zero-cost architecture pre-selection and weight-entangled supernet training."""

__version__ = "0.1.0"
