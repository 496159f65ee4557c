"""Convolutional message passing for building planar-graph reconstruction.

Set ``CONVMPN_THREADS`` before import to cap BLAS threads.
"""
import os

_threads = os.environ.get("CONVMPN_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .geometry import Corner, InferenceGraph, PlanarGraph, build_inference_graph  # noqa: E402
from .model import ConvMPN, ModelConfig, VanillaGNN, build_model  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__all__ = [
    "Corner",
    "InferenceGraph",
    "PlanarGraph",
    "build_inference_graph",
    "ConvMPN",
    "ModelConfig",
    "VanillaGNN",
    "build_model",
    "Tensor",
    "no_grad",
]
__version__ = "0.1.0"
