from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from ..bezier import BezierSurface
from ..dataset import NormStats, normalize_inputs
from ..errors import CorruptFile, DimMismatch, VersionMismatch
from ..geometry import RigidTransform, nearest_rotation
from .config import ModelConfig
from .mvlr import fit_ols
from .nets import NETS, ParamVector, shape_input
from .svr import kkt_violation, rbf_kernel, solve_svr_dual
from .train import LabelScaler, TrainReport, train_network

MODEL_FORMAT_VERSION = 1


@dataclass
class Regressor:
    config: ModelConfig
    params: dict
    scaler: LabelScaler
    norm_stats: NormStats | None = None
    report: TrainReport = field(default_factory=TrainReport)
    last_latency_s: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter block {k} holds non-finite values")
        if self.config.kind in NETS:
            shapes = NETS[self.config.kind][3](self.config)
            if set(shapes) != set(self.params):
                raise ValueError("parameter blocks do not match the network layout")
            vec = ParamVector(shapes)
            for k, s in shapes.items():
                if tuple(self.params[k].shape) != s:
                    raise ValueError(f"block {k} has shape {self.params[k].shape}, expected {s}")
                vec[k][:] = self.params[k]
            self._vec = vec

    def _raw(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.kind == "MVLR":
            return x @ self.params["W"] + self.params["b"]
        if cfg.kind == "SVR":
            k = rbf_kernel(x, self.params["support"], float(self.params["gamma"][0]))
            return k @ self.params["coef"] + self.params["bias"]
        forward = NETS[cfg.kind][1]
        y, _ = forward(self._vec, shape_input(cfg, x), cfg.tanh_dims)
        return y

    def predict_readings(self, window: np.ndarray) -> np.ndarray:
        """Predict from raw readings, normalising with the embedded statistics."""
        if self.norm_stats is None:
            raise ValueError("model carries no normalisation statistics")
        w = np.asarray(window, dtype=float)
        single = w.ndim == 2
        w = w.reshape(-1, self.config.window_len, self.config.n_channels)
        out = predict(self, normalize_inputs(self.norm_stats, w))
        return out[0] if single else out


def predict(model: Regressor, x) -> np.ndarray:
    """Label-space outputs for normalised inputs of shape (D,), (N, D), (steps, C) or (N, steps, C)."""
    cfg = model.config
    x = np.asarray(x, dtype=float)
    d = cfg.input_dim
    window = (cfg.window_len, cfg.n_channels)
    single = x.ndim == 1 or (x.ndim == 2 and x.shape[1] != d and x.shape == window)
    if single:
        x = x.reshape(1, -1)
    elif x.ndim == 3:
        if x.shape[1:] != window:
            raise DimMismatch(f"window shape {x.shape[1:]} != {window}")
        x = x.reshape(len(x), -1)
    elif x.ndim != 2:
        raise DimMismatch(f"cannot interpret input of shape {x.shape}")
    if x.shape[1] != d:
        raise DimMismatch(f"input has {x.shape[1]} values per sample, model expects {d}")
    t0 = time.perf_counter()
    out = model.scaler.decode(model._raw(x))
    model.last_latency_s = time.perf_counter() - t0
    return out[0] if single else out


# --------------------------------------------------------------------------- training entry points

def _xy(data):
    x, y = data
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def train_mvlr(x, y, config: ModelConfig | None = None) -> Regressor:
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    if config is None:
        config = ModelConfig("MVLR", x.shape[1], y.shape[1], window_len=1, n_channels=x.shape[1])
    w, b = fit_ols(x, y)
    resid = x @ w + b - y
    report = TrainReport(train_loss=[float(np.mean(resid * resid))], epochs_run=1, best_epoch=0,
                         stop_reason="closed_form")
    return Regressor(config, {"W": w, "b": b}, LabelScaler.identity(y.shape[1]), report=report)


def _train_net(kind: str, train, val, config: ModelConfig) -> Regressor:
    if config.kind != kind:
        raise ValueError(f"config is for {config.kind}, not {kind}")
    xt, yt = _xy(train)
    xv, yv = _xy(val)
    if yt.shape[1] != config.output_dim or yv.shape[1] != config.output_dim:
        raise DimMismatch(f"targets have {yt.shape[1]} columns, config expects {config.output_dim}")
    scaler = LabelScaler.fit(yt, config.tanh_dims)
    p, report = train_network(config, xt.reshape(len(xt), -1), scaler.encode(yt),
                              xv.reshape(len(xv), -1), scaler.encode(yv))
    return Regressor(config, p.as_dict(), scaler, report=report)


def train_fnn(train, val, config: ModelConfig) -> Regressor:
    return _train_net("FNN", train, val, config)


def train_lstm(train, val, config: ModelConfig) -> Regressor:
    return _train_net("LSTM", train, val, config)


def default_gamma(x: np.ndarray) -> float:
    var = float(np.var(x))
    return 1.0 / (x.shape[1] * (var if var > 0 else 1.0))


def train_svr(x, y, config: ModelConfig) -> Regressor:
    """One independent ε-SVR per output column on a shared RBF kernel."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    if config.svr_max_train is not None and len(x) > config.svr_max_train:
        rng = np.random.default_rng([config.seed, 13])
        idx = np.sort(rng.choice(len(x), size=config.svr_max_train, replace=False))
        x, y = x[idx], y[idx]
    gamma = config.svr_gamma if config.svr_gamma is not None else default_gamma(x)
    scaler = LabelScaler.fit(y, 0)
    ys = scaler.encode(y)
    k = rbf_kernel(x, x, gamma)
    coefs, biases, iters, gaps, kkts = [], [], [], [], []
    for col in range(ys.shape[1]):
        sol = solve_svr_dual(k, ys[:, col], config.svr_c, config.svr_epsilon, config.svr_tol,
                             config.svr_max_iter)
        coefs.append(sol.coef)
        biases.append(sol.bias)
        iters.append(sol.iterations)
        gaps.append(sol.kkt_gap)
        kkts.append(kkt_violation(k, ys[:, col], config.svr_c, config.svr_epsilon, sol.coef, sol.bias))
    coef = np.array(coefs).T
    support = np.nonzero(np.any(coef != 0.0, axis=1))[0]
    report = TrainReport(epochs_run=1, best_epoch=0, stop_reason="kkt",
                         extra={"iterations": iters, "kkt_gap": gaps, "kkt_violation": kkts,
                                "n_support": int(len(support)), "n_train": int(len(x)),
                                "gamma": gamma})
    params = {"support": x[support], "coef": coef[support], "bias": np.array(biases),
              "gamma": np.array([gamma])}
    return Regressor(config, params, scaler, report=report)


def fit_regressor(config: ModelConfig, train, val=None) -> Regressor:
    """Train any kind from ``(X, Y)`` pairs; MVLR and SVR ignore ``val``."""
    if config.kind == "MVLR":
        xt, yt = _xy(train)
        return train_mvlr(xt.reshape(len(xt), -1), yt, config)
    if config.kind == "SVR":
        xt, yt = _xy(train)
        return train_svr(xt, yt, config)
    if val is None:
        raise ValueError(f"{config.kind} needs a validation set")
    return (train_fnn if config.kind == "FNN" else train_lstm)(train, val, config)


# --------------------------------------------------------------------------- decoding

def decode_joint(raw) -> RigidTransform:
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if raw.size != 12:
        raise DimMismatch(f"joint output has {raw.size} values, expected 12")
    return RigidTransform(nearest_rotation(raw[:9].reshape(3, 3)), raw[9:].copy())


def decode_membrane(raw, degrees) -> BezierSurface:
    raw = np.asarray(raw, dtype=float).reshape(-1)
    m, n = degrees
    if raw.size != 3 * (m + 1) * (n + 1):
        raise DimMismatch(f"membrane output has {raw.size} values, degrees {degrees} need "
                          f"{3 * (m + 1) * (n + 1)}")
    return BezierSurface.from_vector(raw, (m, n))


# --------------------------------------------------------------------------- files

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def _checksum(blocks: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(blocks):
        h.update(name.encode())
        h.update(np.ascontiguousarray(blocks[name], dtype="<f8").tobytes())
    return h.hexdigest()


def model_to_json(model: Regressor) -> dict:
    stats = model.norm_stats
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "config": model.config.to_json(),
        "norm_stats": None if stats is None else stats.to_json(),
        "norm_stats_digest": None if stats is None else stats.digest(),
        "label_scaler": {"mean": _encode(model.scaler.mean), "scale": _encode(model.scaler.scale)},
        "params": {k: _encode(v) for k, v in sorted(model.params.items())},
        "checksum": _checksum(model.params),
        "report": model.report.to_json(),
    }


def save_model(model: Regressor, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def model_from_json(d: dict) -> Regressor:
    if not isinstance(d, dict) or "format_version" not in d:
        raise CorruptFile("model file has no format_version")
    if d["format_version"] != MODEL_FORMAT_VERSION:
        raise VersionMismatch(f"model format_version {d['format_version']} != {MODEL_FORMAT_VERSION}")
    try:
        config = ModelConfig.from_json(d["config"])
        params = {k: _decode(v) for k, v in d["params"].items()}
        scaler = LabelScaler(_decode(d["label_scaler"]["mean"]), _decode(d["label_scaler"]["scale"]))
        stats = None if d["norm_stats"] is None else NormStats.from_json(d["norm_stats"])
        report = TrainReport.from_json(d.get("report", {}))
        checksum = d["checksum"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"malformed model file: {exc}") from None
    if _checksum(params) != checksum:
        raise CorruptFile("parameter checksum mismatch")
    if stats is not None and stats.digest() != d.get("norm_stats_digest"):
        raise CorruptFile("normalisation statistics digest mismatch")
    try:
        return Regressor(config, params, scaler, stats, report)
    except ValueError as exc:
        raise CorruptFile(str(exc)) from None


def load_model(path) -> Regressor:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    except UnicodeDecodeError:
        raise CorruptFile(f"{path}: not UTF-8 text") from None
    return model_from_json(d)
