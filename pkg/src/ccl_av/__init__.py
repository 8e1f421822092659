"""Dual-stream audio-video diffusion transformer with cross-modal context learning."""

__version__ = "0.1.0"
