"""Few-shot guided diffusion on desk-scale benchmarks."""

__version__ = "0.1.0"
