"""Desk-scale LLM watermarking lab: toy n-gram models, watermark generators
and detectors, attacks, model stealing, and a cross-model IP classifier."""

__version__ = "0.1.0"
