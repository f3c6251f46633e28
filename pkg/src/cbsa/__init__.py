"""Semi-supervised multi-label learning with context-based semantic alignment.

The package is a desk-scale, numpy-only implementation: a small reverse-mode
autodiff engine, frozen surrogate encoders, learnable prompts, a label-specific
decoder, class-distribution-aware pseudo-labels and spectral label contexts.
"""

__version__ = "0.1.0"
