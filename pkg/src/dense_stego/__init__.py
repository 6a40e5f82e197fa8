"""Full-size image-in-image steganography with an FC-DenseNet hiding network."""

from .network import NetworkConfig, StegoNet, channel_ledger, init_parameters
from .training import Checkpoint, HyperParams, load_checkpoint, save_checkpoint, train_loop

__all__ = [
    "Checkpoint",
    "HyperParams",
    "NetworkConfig",
    "StegoNet",
    "channel_ledger",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
]

__version__ = "0.1.0"
