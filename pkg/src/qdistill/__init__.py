"""Dataset distillation for hybrid quantum-classical LeNet classifiers.

Everything runs on a small float64 reverse-mode autodiff engine
(:mod:`qdistill.autodiff`) with a statevector simulator for the quantum layer
(:mod:`qdistill.quantum`). Hot loops live in an optional compiled extension;
:data:`qdistill.kernels.BACKEND` reports which one was loaded.
"""
__version__ = "0.1.0"

from .autodiff import Tape, Tensor, grad, no_grad  # noqa: E402
from .distill import DistillConfig, distill, evaluate_distilled  # noqa: E402
from .models import ModelConfig, build_model  # noqa: E402

__all__ = ["Tape", "Tensor", "grad", "no_grad", "DistillConfig", "distill", "evaluate_distilled", "ModelConfig", "build_model"]
