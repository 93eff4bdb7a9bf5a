"""Decoupled modality-aware prompt tuning for multi-modal re-identification, at desk scale."""

__version__ = "0.1.0"
