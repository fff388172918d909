"""Instruction-conditioned person retrieval on a small numpy autodiff stack."""
from .config import DataConfig, ModelConfig, RunConfig, desk_config
from .errors import ContractError, IRKError, NumericError, ShapeError
from .model import InstructReID
from .tensor import Tape, Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = ["DataConfig", "ModelConfig", "RunConfig", "desk_config", "ContractError", "IRKError",
           "NumericError", "ShapeError", "InstructReID", "Tape", "Tensor", "no_grad", "precision"]
