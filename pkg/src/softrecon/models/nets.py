"""Feed-forward and LSTM networks with hand-written backpropagation.

Parameters live in one flat float64 vector; named arrays are views into
it, so optimisers and finite-difference checks work on the vector while
the forward/backward code reads the named blocks.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig


class ParamVector:
    def __init__(self, shapes: dict, values: np.ndarray | None = None):
        self.shapes = {k: tuple(int(d) for d in s) for k, s in shapes.items()}
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        self.offsets = dict(zip(self.shapes, np.cumsum([0] + sizes[:-1]).tolist()))
        self.size = int(sum(sizes))
        self.vec = np.zeros(self.size) if values is None else np.array(values, dtype=float)
        if self.vec.shape != (self.size,):
            raise ValueError(f"parameter vector has {self.vec.size} values, layout needs {self.size}")

    def __getitem__(self, name: str) -> np.ndarray:
        o = self.offsets[name]
        s = self.shapes[name]
        return self.vec[o:o + int(np.prod(s))].reshape(s)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.shapes)

    def copy(self) -> "ParamVector":
        return ParamVector(self.shapes, self.vec.copy())

    def as_dict(self) -> dict:
        return {k: self[k].copy() for k in self.shapes}


def _sigmoid(z):
    # tanh form never overflows.
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _head(y_lin: np.ndarray, tanh_dims: int) -> np.ndarray:
    if tanh_dims == 0:
        return y_lin
    y = y_lin.copy()
    y[:, :tanh_dims] = np.tanh(y_lin[:, :tanh_dims])
    return y


def _head_backward(dy: np.ndarray, y: np.ndarray, tanh_dims: int) -> np.ndarray:
    if tanh_dims == 0:
        return dy
    d = dy.copy()
    d[:, :tanh_dims] *= 1.0 - y[:, :tanh_dims] ** 2
    return d


# --------------------------------------------------------------------------- FNN

def fnn_shapes(cfg: ModelConfig) -> dict:
    h = cfg.hidden_size
    return {"W1": (h, cfg.input_dim), "b1": (h,), "W2": (cfg.output_dim, h), "b2": (cfg.output_dim,)}


def fnn_init(cfg: ModelConfig, rng: np.random.Generator) -> ParamVector:
    p = ParamVector(fnn_shapes(cfg))
    p["W1"][:] = _glorot(rng, cfg.hidden_size, cfg.input_dim)
    p["W2"][:] = _glorot(rng, cfg.output_dim, cfg.hidden_size)
    return p


def fnn_forward(p: ParamVector, x: np.ndarray, tanh_dims: int):
    h = _sigmoid(x @ p["W1"].T + p["b1"])
    y = _head(h @ p["W2"].T + p["b2"], tanh_dims)
    return y, (x, h, y)


def fnn_backward(p: ParamVector, cache, dy: np.ndarray, tanh_dims: int) -> ParamVector:
    x, h, y = cache
    g = p.zeros_like()
    dz2 = _head_backward(dy, y, tanh_dims)
    g["W2"][:] = dz2.T @ h
    g["b2"][:] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["W2"]) * h * (1.0 - h)
    g["W1"][:] = dz1.T @ x
    g["b1"][:] = dz1.sum(axis=0)
    return g


# --------------------------------------------------------------------------- LSTM

def lstm_shapes(cfg: ModelConfig) -> dict:
    h, c = cfg.hidden_size, cfg.n_channels
    return {"W": (4 * h, c), "U": (4 * h, h), "b": (4 * h,), "V": (cfg.output_dim, h),
            "d": (cfg.output_dim,)}


def lstm_init(cfg: ModelConfig, rng: np.random.Generator) -> ParamVector:
    h = cfg.hidden_size
    p = ParamVector(lstm_shapes(cfg))
    for k in range(4):
        p["W"][k * h:(k + 1) * h] = _glorot(rng, h, cfg.n_channels)
        p["U"][k * h:(k + 1) * h] = _glorot(rng, h, h)
    p["b"][h:2 * h] = cfg.forget_bias
    p["V"][:] = _glorot(rng, cfg.output_dim, h)
    return p


def lstm_forward(p: ParamVector, x: np.ndarray, tanh_dims: int):
    """``x`` is (N, steps, channels); gate order in the stacked weights is i, f, g, o."""
    n, steps, _ = x.shape
    hs = p["U"].shape[1]
    U = p["U"]
    xw = x @ p["W"].T + p["b"]  # (N, steps, 4H), input projection for all steps at once
    hseq = np.zeros((n, steps + 1, hs))
    cseq = np.zeros((n, steps + 1, hs))
    gates = np.empty((n, steps, 4 * hs))
    tcs = np.empty((n, steps, hs))
    for t in range(steps):
        z = xw[:, t] + hseq[:, t] @ U.T
        a = _sigmoid(z)
        a[:, 2 * hs:3 * hs] = np.tanh(z[:, 2 * hs:3 * hs])
        gates[:, t] = a
        i, f, g, o = a[:, :hs], a[:, hs:2 * hs], a[:, 2 * hs:3 * hs], a[:, 3 * hs:]
        c = f * cseq[:, t] + i * g
        cseq[:, t + 1] = c
        tc = np.tanh(c)
        tcs[:, t] = tc
        hseq[:, t + 1] = o * tc
    h = hseq[:, steps]
    y = _head(h @ p["V"].T + p["d"], tanh_dims)
    return y, (x, hseq, cseq, gates, tcs, y)


def lstm_backward(p: ParamVector, cache, dy: np.ndarray, tanh_dims: int) -> ParamVector:
    x, hseq, cseq, gates, tcs, y = cache
    n, steps, _ = x.shape
    hs = p["U"].shape[1]
    grad = p.zeros_like()
    dout = _head_backward(dy, y, tanh_dims)
    grad["V"][:] = dout.T @ hseq[:, steps]
    grad["d"][:] = dout.sum(axis=0)
    dh = dout @ p["V"]
    dc = np.zeros_like(dh)
    U = p["U"]
    dz = np.empty((n, steps, 4 * hs))
    for t in range(steps - 1, -1, -1):
        a = gates[:, t]
        i, f, g, o = a[:, :hs], a[:, hs:2 * hs], a[:, 2 * hs:3 * hs], a[:, 3 * hs:]
        tc = tcs[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        d = dz[:, t]
        d[:, :hs] = dc * g * i * (1.0 - i)
        d[:, hs:2 * hs] = dc * cseq[:, t] * f * (1.0 - f)
        d[:, 2 * hs:3 * hs] = dc * i * (1.0 - g * g)
        d[:, 3 * hs:] = dh * tc * o * (1.0 - o)
        dh = d @ U
        dc = dc * f
    flat = dz.reshape(n * steps, -1)
    grad["W"][:] = flat.T @ x.reshape(n * steps, -1)
    grad["U"][:] = flat.T @ hseq[:, :steps].reshape(n * steps, -1)
    grad["b"][:] = flat.sum(axis=0)
    return grad


NETS = {
    "FNN": (fnn_init, fnn_forward, fnn_backward, fnn_shapes),
    "LSTM": (lstm_init, lstm_forward, lstm_backward, lstm_shapes),
}


def shape_input(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Flat (N, D) for the FNN, (N, steps, channels) for the LSTM."""
    x = np.asarray(x, dtype=float)
    if cfg.kind == "LSTM":
        return x.reshape(len(x), cfg.window_len, cfg.n_channels)
    return x.reshape(len(x), -1)


def mse_loss_grad(p: ParamVector, cfg: ModelConfig, x: np.ndarray, t: np.ndarray):
    """Mean squared error over all outputs and its gradient with respect to ``p.vec``."""
    _, forward, backward, _ = NETS[cfg.kind]
    # Divergence is reported by the caller as NonFiniteLoss, not as warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        y, cache = forward(p, x, cfg.tanh_dims)
        r = y - t
        loss = float(np.mean(r * r))
        dy = 2.0 * r / r.size
        return loss, backward(p, cache, dy, cfg.tanh_dims).vec


def mse_loss(p: ParamVector, cfg: ModelConfig, x: np.ndarray, t: np.ndarray) -> float:
    _, forward, _, _ = NETS[cfg.kind]
    with np.errstate(over="ignore", invalid="ignore"):
        y, _ = forward(p, x, cfg.tanh_dims)
        return float(np.mean((y - t) ** 2))
