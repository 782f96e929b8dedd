"""Distribution-matching distillation of 2D flow-matching models, with tracking-error diagnostics."""

__version__ = "0.1.0"
