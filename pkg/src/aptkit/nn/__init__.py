from .autoencoder import (
    AttentionAutoencoder,
    LossTrace,
    TrainConfig,
    TrainingDivergence,
    attention_weights,
    continue_training,
    default_latent_dim,
    encode,
    fine_tune_transfer,
    gradient_check,
    reconstruct,
    reconstruction_errors,
    train_autoencoder,
    transfer_gradient_check,
)
from .core import Adam, DenseNet, finite_difference_check
from .io import ModelLoadError, load_model, save_model

__all__ = [
    "Adam", "AttentionAutoencoder", "DenseNet", "LossTrace", "ModelLoadError", "TrainConfig",
    "TrainingDivergence", "attention_weights", "continue_training", "default_latent_dim", "encode",
    "finite_difference_check", "fine_tune_transfer", "gradient_check", "load_model", "reconstruct",
    "reconstruction_errors", "save_model", "train_autoencoder", "transfer_gradient_check",
]
