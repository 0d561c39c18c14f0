"""Disentanglement-then-reconstruction unsupervised domain adaptation at desk scale."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, detach  # noqa: E402
from .config import DataConfig, OptimConfig, RunConfig, TrainConfig, parse_config  # noqa: E402
from .model import Dims, NetworkEnsemble, PrototypeBank, forward_all, refresh_prototypes  # noqa: E402
from .trainer import train, train_step  # noqa: E402

__all__ = [
    "Tensor", "backward", "detach", "DataConfig", "OptimConfig", "RunConfig", "TrainConfig",
    "parse_config", "Dims", "NetworkEnsemble", "PrototypeBank", "forward_all",
    "refresh_prototypes", "train", "train_step",
]
