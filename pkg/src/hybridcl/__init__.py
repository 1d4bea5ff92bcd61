"""Continual learning for a desk-scale hybrid CTC/transducer recognizer."""

__version__ = "0.1.0"
