"""Masked-face recognition with mask decoupling and unmasked-face restoration."""

__version__ = "0.1.0"
