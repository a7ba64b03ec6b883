"""Shared-autonomy workbench: goal inference, assistance blending, and evaluation."""

__version__ = "0.1.0"
