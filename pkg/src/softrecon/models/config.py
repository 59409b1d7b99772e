from __future__ import annotations

from dataclasses import asdict, dataclass, fields

KINDS = ("MVLR", "FNN", "LSTM", "SVR")
HEADS = ("linear", "tanh", "joint")
OPTIMIZERS = ("momentum", "adam")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyper-parameters for one regressor.

    ``output_head`` is "linear", "tanh" or "joint" (tanh on the nine
    rotation entries, linear on the translation). ``input_dim`` must equal
    ``window_len * n_channels``; the LSTM consumes the window step by step.
    """

    kind: str
    input_dim: int
    output_dim: int
    hidden_size: int = 50
    output_head: str = "linear"
    seed: int = 0
    window_len: int = 10
    n_channels: int = 12
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    forget_bias: float = 1.0
    svr_c: float = 1.0
    svr_epsilon: float = 0.01
    svr_gamma: float | None = None
    svr_tol: float = 1e-3
    svr_max_iter: int = 1_000_000
    svr_max_train: int | None = None

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ValueError("input and output dimensions must be positive")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be at least 1")
        if self.window_len * self.n_channels != self.input_dim:
            raise ValueError(f"input_dim {self.input_dim} != window_len * n_channels "
                             f"({self.window_len} * {self.n_channels})")
        if self.output_head == "joint" and self.output_dim != 12:
            raise ValueError("joint head needs 12 outputs")
        if self.svr_c <= 0:
            raise ValueError("C must be positive")
        if self.svr_epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("optimizer settings must be positive")

    @property
    def tanh_dims(self) -> int:
        """Number of leading outputs behind a tanh activation."""
        return {"linear": 0, "tanh": self.output_dim, "joint": 9}[self.output_head]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})
