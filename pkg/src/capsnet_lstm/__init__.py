"""Capsule-network + LSTM video-clip classifier built on hand-written numpy kernels."""

from .model import ModelConfig, ModelGraph, build_model, load_weights, model_summary, preset, save_weights

__all__ = ["ModelConfig", "ModelGraph", "build_model", "load_weights", "model_summary", "preset", "save_weights"]
__version__ = "0.1.0"
