"""Latent-graph autoencoder for tabular missing-data imputation."""

from . import baselines, dataio, ensemble, evaluation, missingness, model, objectives, \
    tensor, training

__all__ = ["baselines", "dataio", "ensemble", "evaluation", "missingness", "model",
           "objectives", "tensor", "training"]

__version__ = "0.1.0"
