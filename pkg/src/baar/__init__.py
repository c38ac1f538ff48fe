"""Alternating forward/backward retention models for time series.

A small numpy library: an autodiff core (``baar.tensor``), rotary/decay
positional machinery, retention in parallel, recurrent and chunkwise
forms, the alternating model with ``[SOS]``/``[EOS]`` tokens, training
objectives, synthetic data, and diagnostics. ``python -m baar`` or the
``baar`` script exposes the same workflow on the command line.
"""

from .model import BaarModel, ModelConfig, ModelOutput, load_checkpoint, save_checkpoint, sequence_representation
from .retention import RetentionLayer
from .tensor import Tensor, backward, no_grad
from .training import PretrainStrategy, TrainConfig, evaluate, finetune, train_pretrain

__version__ = "0.1.0"

__all__ = [
    "BaarModel",
    "ModelConfig",
    "ModelOutput",
    "PretrainStrategy",
    "RetentionLayer",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "finetune",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "sequence_representation",
    "train_pretrain",
]
