"""Query-based object detector with box-overlap-masked attention.

A decoder-only detector trained end-to-end on synthetic scenes: queries
carry a content vector and a box, self-attention between queries is
biased and masked by box overlap, features are read off a small pyramid
at query-generated points, mixed per query, and refined over stages.
Everything runs on numpy with an optional compiled kernel core.
"""

__version__ = "0.1.0"

from . import tensor
from .config import build_config, RunConfig
from .data import DataConfig, generate_scene, make_dataset
from .decoder import DetectionModel, ModelConfig
from .errors import ContractError, NumericError
from .evaluate import evaluate_model
from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, no_grad

__all__ = [
    "ContractError",
    "DataConfig",
    "DetectionModel",
    "KERNEL_BACKEND",
    "ModelConfig",
    "NumericError",
    "RunConfig",
    "Tensor",
    "__version__",
    "build_config",
    "evaluate_model",
    "generate_scene",
    "make_dataset",
    "no_grad",
    "tensor",
]
