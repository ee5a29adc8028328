"""Few-data backbone transfer via token-level re-representation, plus student distillation on guided-generation corpora."""

__version__ = "0.1.0"
