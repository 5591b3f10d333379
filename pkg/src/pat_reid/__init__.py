"""Desk-scale re-identification testbed.

Core pieces: a numpy-backed autodiff layer, a token-masked transformer
encoder with per-region part tokens, a momentum feature memory with
cross-id neighbor mining, distillation/triplet objectives, a synthetic
labeled-image generator, retrieval metrics, and a training engine
exposed through a FastAPI service and a thin CLI.
"""

__version__ = "0.1.0"

from .autodiff import Tensor

__all__ = ["Tensor", "__version__"]
