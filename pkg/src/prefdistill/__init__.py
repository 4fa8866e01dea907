"""Score distillation of toy 3D assets with a learned preference reward."""

__version__ = "0.1.0"
