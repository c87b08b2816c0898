"""Dual-encoder contrastive training with DINO-style self-distillation and
multilingual caption augmentation, plus the matching retrieval and zero-shot
evaluation harness.  Built on a minimal reverse-mode tensor engine so every
gradient is checkable against finite differences.
"""

__version__ = "0.1.0"
