from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NonFiniteLoss
from .config import ModelConfig
from .nets import NETS, ParamVector, mse_loss, mse_loss_grad, shape_input

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    best_val: float = float("inf")
    stop_reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainReport":
        return cls(**d)


@dataclass
class LabelScaler:
    """z-score for linear-head outputs; tanh outputs stay in their native range."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, y: np.ndarray, tanh_dims: int = 0) -> "LabelScaler":
        mean = y.mean(axis=0)
        std = y.std(axis=0)
        scale = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
        mean[:tanh_dims] = 0.0
        scale[:tanh_dims] = 1.0
        return cls(mean, scale)

    @classmethod
    def identity(cls, k: int) -> "LabelScaler":
        return cls(np.zeros(k), np.ones(k))

    def encode(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.scale

    def decode(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean


class Momentum:
    def __init__(self, cfg: ModelConfig, size: int):
        self.lr, self.mu = cfg.learning_rate, cfg.momentum
        self.v = np.zeros(size)

    def step(self, theta: np.ndarray, grad: np.ndarray):
        self.v *= self.mu
        self.v -= self.lr * grad
        theta += self.v


class Adam:
    def __init__(self, cfg: ModelConfig, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = cfg.learning_rate, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_network(cfg: ModelConfig, x_train, y_train, x_val, y_val,
                  init: ParamVector | None = None) -> tuple[ParamVector, TrainReport]:
    """Mini-batch training with early stopping on validation MSE.

    Inputs are normalised readings, targets already label-scaled. Returns
    the parameters of the best validation epoch.
    """
    init_fn = NETS[cfg.kind][0]
    x_train, x_val = shape_input(cfg, x_train), shape_input(cfg, x_val)
    y_train, y_val = np.asarray(y_train, float), np.asarray(y_val, float)
    if len(x_val) == 0:
        raise ValueError("validation set is empty")
    if len(x_train) != len(y_train) or len(x_val) != len(y_val):
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng([cfg.seed, 11])
    p = init.copy() if init is not None else init_fn(cfg, rng)
    opt = (Adam if cfg.optimizer == "adam" else Momentum)(cfg, p.size)
    best = p.copy()
    report = TrainReport()
    wait = 0
    n = len(x_train)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grad = mse_loss_grad(p, cfg, x_train[idx], y_train[idx])
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, batch starting {lo}")
            opt.step(p.vec, grad)
            total += loss * len(idx)
        val = mse_loss(p, cfg, x_val, y_val)
        if not np.isfinite(val):
            raise NonFiniteLoss(f"validation loss became {val} at epoch {epoch}")
        report.train_loss.append(total / n)
        report.val_loss.append(val)
        report.epochs_run = epoch + 1
        if val < report.best_val:
            report.best_val, report.best_epoch = val, epoch
            best = p.copy()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                report.stop_reason = "early_stop"
                break
        log.debug("epoch %d train %.6g val %.6g", epoch, total / n, val)
    if not report.stop_reason:
        report.stop_reason = "max_epochs"
    return best, report
