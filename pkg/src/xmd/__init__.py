"""Desk-scale cross-modal knowledge distillation for speech LLMs."""

__version__ = "0.1.0"
