"""Desk-scale dual-stream PET/CT pre-training, evaluation metrics and metabolic atlas."""

__version__ = "0.1.0"
