"""Minimal differentiable layers for the recommender: embeddings, GRU,
bidirectional wrapper, attention with context, dense, batch norm, dropout,
MSE/L2 losses, Adam and checkpoint I/O."""

from nere.neuralcore.layers import (
    AttentionWithContext,
    BatchNorm,
    Bidirectional,
    Dense,
    Dropout,
    Embedding,
    GRU,
    GRUCell,
    attention_forward,
    bidirectional_forward,
    gru_step,
    sigmoid,
)
from nere.neuralcore.losses import add_l2, l2_grad, l2_penalty, mse_grad, mse_loss
from nere.neuralcore.optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "AttentionWithContext",
    "BatchNorm",
    "Bidirectional",
    "Dense",
    "Dropout",
    "Embedding",
    "GRU",
    "GRUCell",
    "adam_step",
    "add_l2",
    "attention_forward",
    "bidirectional_forward",
    "gru_step",
    "l2_grad",
    "l2_penalty",
    "mse_grad",
    "mse_loss",
    "sigmoid",
]
