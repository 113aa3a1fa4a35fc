"""Talking-model distillation: interactive teacher-student communication for KD."""

__version__ = "0.1.0"
