"""Numpy layer kernels with manual backpropagation."""

from .functional import cross_entropy, softmax
from .gradcheck import grad_check, layer_grad_check
from .layers import GRU, Attention, Conv2D, Dense, Layer, MaxPool2D, SoftmaxHead
from .network import Network, NetworkConfig, build_network, load_network, save_network
from .optim import Adam, adam_step

__all__ = [
    "Adam", "Attention", "Conv2D", "Dense", "GRU", "Layer", "MaxPool2D", "Network", "NetworkConfig",
    "SoftmaxHead", "adam_step", "build_network", "cross_entropy", "grad_check", "layer_grad_check",
    "load_network", "save_network", "softmax",
]
