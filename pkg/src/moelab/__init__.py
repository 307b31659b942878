"""moelab: a desk-scale mixture-of-experts laboratory.

Everything runs in float64 on a tiny reverse-mode autodiff engine, so toy
models are slow but exactly reproducible: reruns are bit-identical, gradients
check against finite differences, and analysis results are recountable by
hand.
"""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
