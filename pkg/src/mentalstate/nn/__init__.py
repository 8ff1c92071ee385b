"""Small numpy neural-network engine: layers, Adam, loss, gradient checks."""
from .functional import LossOutput, softmax, softmax_cross_entropy
from .gradcheck import GradCheckReport, WithLoss, grad_check
from .layers import BatchNorm1d, Conv1d, Dense, Dropout, GlobalAvgPool, Layer, MaxPool1d, ReLU
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "BatchNorm1d", "Conv1d", "Dense", "Dropout", "GlobalAvgPool",
    "GradCheckReport", "Layer", "LossOutput", "MaxPool1d", "ReLU", "WithLoss",
    "adam_step", "grad_check", "softmax", "softmax_cross_entropy",
]
