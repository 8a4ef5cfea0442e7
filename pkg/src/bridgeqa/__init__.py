"""Question-bridged graph interaction network for video question answering.

Self-contained: a numpy-backed autodiff tensor engine, graph construction
over appearance/motion/question features, cross-graph interactions with the
question graph as a bridge, three task decoders, and a training loop, all
verifiable at desk scale on synthetic data.
"""

from .tensor import Tensor, backward, finite_difference_gradient, zero_grads
from .model import ABLATIONS, Model, ModelConfig
from .training import TrainConfig, TrainReport, evaluate, fit, gradient_check_model

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_difference_gradient", "zero_grads",
    "ABLATIONS", "Model", "ModelConfig",
    "TrainConfig", "TrainReport", "evaluate", "fit", "gradient_check_model",
    "__version__",
]
