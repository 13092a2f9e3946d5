"""Multimodal scene classifier with activation-aware int4 weight quantization, in numpy."""
from .config import ModelConfig, tiny_config
from .model import Model, forward, loss_and_grads, predict_logits
from .quantizer import QuantPolicy, apply_awq, collect_calibration_stats
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "ModelConfig", "tiny_config", "Model", "forward", "loss_and_grads", "predict_logits",
    "QuantPolicy", "apply_awq", "collect_calibration_stats", "TrainConfig", "evaluate", "train",
]
__version__ = "0.1.0"
