"""Class-incremental audio-visual recognition with hierarchical augmentation and distillation."""

__version__ = "0.1.0"
