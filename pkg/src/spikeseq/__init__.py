"""Spiking state-space sequence models: Binary S4D, GSU, and LIF baselines."""

from . import activations, autodiff, data, gsu, lif, network, ssm, training

__all__ = ["activations", "autodiff", "data", "gsu", "lif", "network", "ssm",
           "training"]
__version__ = "0.1.0"
