"""Adapter-based cross-language dense retrieval (DPR and ColBERT) on a numpy autodiff core."""

__version__ = "0.1.0"
