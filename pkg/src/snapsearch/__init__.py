"""snapsearch: architecture search over stack-program network blocks."""

__version__ = "0.1.0"
