"""Selective scale-factor fine-tuning for small diffusion transformers."""
from __future__ import annotations

__version__ = "0.1.0"
