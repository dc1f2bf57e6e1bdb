from .checkpoint import ArchitectureMismatch, load_checkpoint, save_checkpoint
from .losses import cross_entropy, entropy, softmax
from .model import (ARCH_TINY_CONVNET, Conv2D, Dense, ForwardCache, GlobalAvgPool, Model, Norm, ReLU,
                    backward, forward, tiny_convnet)
from .optim import AdamState, adam_step, cosine_lr
from .train import NumericalError, TrainConfig, error_rate, predict, pretrain

__all__ = [
    "ArchitectureMismatch",
    "ARCH_TINY_CONVNET", "AdamState", "Conv2D", "Dense", "ForwardCache", "GlobalAvgPool", "Model", "Norm",
    "NumericalError", "ReLU", "TrainConfig", "adam_step", "backward", "cosine_lr", "cross_entropy", "entropy",
    "error_rate", "forward", "load_checkpoint", "predict", "pretrain", "save_checkpoint", "softmax", "tiny_convnet",
]
