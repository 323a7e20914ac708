"""GP-KAN: Kolmogorov-Arnold networks whose neurons are 1-d Gaussian
processes, with Gaussian moments propagated in closed form."""
from .gaussian_core import (DomainError, GaussianImage, GaussianScalar, GaussianVector, denormalize,
                            gaussian_add, gaussian_scale, normalize)
from .gp_neuron import GPNeuronParams, gp_posterior, neuron_forward
from .layers import (AvgPoolLayer, ConvGPLayer, FCGPLayer, FlattenLayer, Network, NormalizeLayer, SpecError,
                     avgpool_forward, col2im, convgp_forward, fcgp_forward, im2col)
from .training import (Dataset, TrainConfig, accuracy, adam_step, gaussian_nll, load_checkpoint, mse_loss,
                       predict_class, save_checkpoint, train)

__all__ = [
    "DomainError", "GaussianImage", "GaussianScalar", "GaussianVector", "denormalize", "gaussian_add",
    "gaussian_scale", "normalize", "GPNeuronParams", "gp_posterior", "neuron_forward", "AvgPoolLayer",
    "ConvGPLayer", "FCGPLayer", "FlattenLayer", "Network", "NormalizeLayer", "SpecError", "avgpool_forward",
    "col2im", "convgp_forward", "fcgp_forward", "im2col", "Dataset", "TrainConfig", "accuracy", "adam_step",
    "gaussian_nll", "load_checkpoint", "mse_loss", "predict_class", "save_checkpoint", "train",
]
