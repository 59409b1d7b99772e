"""Regression models mapping sensor windows to shape parameters."""

from .config import KINDS, ModelConfig
from .core import (
    MODEL_FORMAT_VERSION,
    Regressor,
    decode_joint,
    decode_membrane,
    fit_regressor,
    load_model,
    model_from_json,
    model_to_json,
    predict,
    save_model,
    train_fnn,
    train_lstm,
    train_mvlr,
    train_svr,
)
from .train import LabelScaler, TrainReport

__all__ = [
    "KINDS", "MODEL_FORMAT_VERSION", "LabelScaler", "ModelConfig", "Regressor", "TrainReport",
    "decode_joint", "decode_membrane", "fit_regressor", "load_model", "model_from_json",
    "model_to_json", "predict", "save_model", "train_fnn", "train_lstm", "train_mvlr", "train_svr",
]
