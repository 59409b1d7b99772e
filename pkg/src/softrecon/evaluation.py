"""Error metrics, model comparison, sensor ablation, grid-resolution study and latency."""

from __future__ import annotations

import csv
import io
import math
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .bezier import design_matrix
from .dataset import Dataset, fit_normalizer, normalize_inputs, relabel_membrane
from .errors import DimMismatch, MissingMarker
from .geometry import rotation_error
from .models import ModelConfig, Regressor, decode_joint, decode_membrane, fit_regressor, predict

JOINT_TARGETS = ("yaw", "pitch", "roll", "translation")
MEMBRANE_TARGETS = ("distance",)
HIST_BINS = 30
HIST_QUANTILE = 99.5


@dataclass
class ErrorStats:
    mean: float
    std: float
    max: float

    @classmethod
    def of(cls, values: np.ndarray) -> "ErrorStats":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size == 0:
            return cls(float("nan"), float("nan"), float("nan"))
        return cls(float(v.mean()), float(v.std()), float(v.max()))


@dataclass
class Histogram:
    """``HIST_BINS`` uniform bins on [0, p99.5] plus one overflow bin up to the maximum."""

    edges: np.ndarray
    counts: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray, bins: int = HIST_BINS, quantile: float = HIST_QUANTILE) -> "Histogram":
        v = np.asarray(values, dtype=float).reshape(-1)
        hi = float(np.percentile(v, quantile)) if v.size else 0.0
        if hi <= 0.0:
            hi = float(v.max()) if v.size and v.max() > 0 else 1.0
        edges = np.linspace(0.0, hi, bins + 1)
        counts = np.zeros(bins + 1, dtype=np.int64)
        inside = v[v <= hi]
        counts[:bins] = np.histogram(inside, edges)[0]
        counts[bins] = int(np.sum(v > hi))
        top = max(hi, float(v.max())) if v.size else hi
        return cls(np.append(edges, top), counts)

    def to_json(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist()}


@dataclass
class MetricReport:
    kind: str
    model_id: str
    dataset_id: str
    n_samples: int
    stats: dict
    histograms: dict
    raw: dict = field(repr=False, default_factory=dict)
    t_us: np.ndarray | None = field(repr=False, default=None)
    raw_path: str | None = None

    def mean(self, target: str) -> float:
        return self.stats[target].mean

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "model_id": self.model_id, "dataset_id": self.dataset_id,
            "n_samples": self.n_samples, "raw_path": self.raw_path,
            "stats": {k: vars(s) for k, s in self.stats.items()},
            "histograms": {k: h.to_json() for k, h in self.histograms.items()},
        }


def _report(kind, raw: dict, n: int, t_us, model_id, dataset_id) -> MetricReport:
    return MetricReport(kind, model_id, dataset_id, n,
                        {k: ErrorStats.of(v) for k, v in raw.items()},
                        {k: Histogram.of(v) for k, v in raw.items()}, raw,
                        None if t_us is None else np.asarray(t_us))


def _predict_dataset(model: Regressor, ds: Dataset) -> np.ndarray:
    x = ds.inputs
    if model.norm_stats is not None:
        x = normalize_inputs(model.norm_stats, x)
    return predict(model, x.reshape(len(ds), -1))


# --------------------------------------------------------------------------- joint

def joint_errors(pred: np.ndarray, truth: np.ndarray) -> dict:
    """Per-sample absolute yaw/pitch/roll errors (degrees) and translation error magnitude (mm)."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape[-1] != 12 or truth.shape[-1] != 12 or len(pred) != len(truth):
        raise DimMismatch(f"joint errors need matching (N, 12) arrays, got {pred.shape} and {truth.shape}")
    ang = np.empty((len(pred), 3))
    trans = np.empty(len(pred))
    for i, (p, t) in enumerate(zip(pred, truth)):
        tp = decode_joint(p)
        ang[i] = rotation_error(tp.rotation, t[:9].reshape(3, 3)).as_tuple()
        trans[i] = np.linalg.norm(tp.translation - t[9:])
    return {"yaw": ang[:, 0], "pitch": ang[:, 1], "roll": ang[:, 2], "translation": trans}


def eval_joint(model: Regressor, ds: Dataset, truth: np.ndarray | None = None,
               model_id: str = "model", dataset_id: str = "test") -> MetricReport:
    """Decode every prediction and compare with ``truth`` (default: the dataset labels)."""
    if model.config.output_dim != 12:
        raise DimMismatch(f"model has {model.config.output_dim} outputs, joint labels need 12")
    truth = ds.labels if truth is None else np.asarray(truth, dtype=float)
    raw = joint_errors(_predict_dataset(model, ds), truth)
    return _report("joint", raw, len(ds), ds.t_us, model_id, dataset_id)


# --------------------------------------------------------------------------- membrane

def _grid_side(dim: int) -> int:
    side = math.isqrt(dim // 3)
    if 3 * side * side != dim:
        raise DimMismatch(f"{dim} outputs do not form a square control grid")
    return side


def membrane_distances(controls: np.ndarray, markers: np.ndarray, uv: np.ndarray, degrees) -> np.ndarray:
    """(N, M) distances between markers and the surface of each control grid at the markers' uv."""
    m, n = degrees
    basis = design_matrix(np.asarray(uv, dtype=float), m, n)
    surf = np.einsum("kp,npc->nkc", basis, np.asarray(controls, dtype=float).reshape(len(controls), -1, 3))
    return np.linalg.norm(surf - markers, axis=-1)


def eval_membrane(model: Regressor, ds: Dataset, uv_table, model_id: str = "model",
                  dataset_id: str = "test") -> MetricReport:
    """Per-marker distance from each captured marker to the predicted surface at its uv."""
    if ds.markers is None or not ds.marker_ids:
        raise MissingMarker("dataset carries no robot-frame markers")
    uv = uv_table.lookup(ds.marker_ids)
    degrees = tuple(ds.degrees) if ds.degrees else uv_table.degrees
    if 3 * (degrees[0] + 1) * (degrees[1] + 1) != model.config.output_dim:
        raise DimMismatch(f"model has {model.config.output_dim} outputs, degrees {degrees} need "
                          f"{3 * (degrees[0] + 1) * (degrees[1] + 1)}")
    d = membrane_distances(_predict_dataset(model, ds), ds.markers, uv, degrees)
    return _report("membrane", {"distance": d.reshape(-1)}, len(ds), ds.t_us, model_id, dataset_id)


def fit_floor(ds: Dataset, uv_table) -> float:
    """Mean marker distance of the fitted labels themselves."""
    degrees = tuple(ds.degrees) if ds.degrees else uv_table.degrees
    return float(membrane_distances(ds.labels, ds.markers, uv_table.lookup(ds.marker_ids), degrees).mean())


def evaluate(model: Regressor, ds: Dataset, uv_table=None, truth=None, model_id="model",
             dataset_id="test") -> MetricReport:
    if ds.kind == "joint":
        return eval_joint(model, ds, truth, model_id, dataset_id)
    if uv_table is None:
        raise ValueError("membrane evaluation needs a uv table")
    return eval_membrane(model, ds, uv_table, model_id, dataset_id)


# --------------------------------------------------------------------------- raw dumps

def dump_raw(report: MetricReport, path) -> str:
    """Per-sample errors as CSV; full repr precision so statistics recompute exactly."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        if report.kind == "joint":
            fh.write("index,t_us," + ",".join(JOINT_TARGETS) + "\n")
            cols = [report.raw[k] for k in JOINT_TARGETS]
            for i in range(report.n_samples):
                t = "" if report.t_us is None else int(report.t_us[i])
                fh.write(f"{i},{t}," + ",".join(repr(float(c[i])) for c in cols) + "\n")
        else:
            d = report.raw["distance"].reshape(report.n_samples, -1)
            fh.write("index,t_us,marker,distance\n")
            for i in range(report.n_samples):
                t = "" if report.t_us is None else int(report.t_us[i])
                for j, v in enumerate(d[i]):
                    fh.write(f"{i},{t},{j},{float(v)!r}\n")
    report.raw_path = str(path)
    return str(path)


def stats_from_dump(path) -> dict:
    """Recompute per-target statistics from a raw dump."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    targets = [k for k in rows[0] if k not in ("index", "t_us", "marker")] if rows else []
    return {k: ErrorStats.of(np.array([float(r[k]) for r in rows])) for k in targets}


# --------------------------------------------------------------------------- training helpers

def default_config(kind: str, ds: Dataset, **overrides) -> ModelConfig:
    w, c = ds.inputs.shape[1], ds.inputs.shape[2]
    k = ds.labels.shape[1]
    head = "joint" if ds.kind == "joint" and kind in ("FNN", "LSTM") else "linear"
    return ModelConfig(kind, w * c, k, output_head=head, window_len=w, n_channels=c, **overrides)


def fit_config(config: ModelConfig, ds: Dataset) -> ModelConfig:
    """Adapt input and output sizes of ``config`` to the dataset's window and labels."""
    w, c = ds.inputs.shape[1], ds.inputs.shape[2]
    return config.replace(window_len=w, n_channels=c, input_dim=w * c, output_dim=ds.labels.shape[1])


def train_model(config: ModelConfig, train: Dataset, val: Dataset | None = None) -> Regressor:
    """Fit normalisation on ``train``, train, and embed the statistics in the model."""
    stats = fit_normalizer(train)
    x = normalize_inputs(stats, train.inputs).reshape(len(train), -1)
    val_xy = None
    if val is not None:
        val_xy = (normalize_inputs(stats, val.inputs).reshape(len(val), -1), val.labels)
    model = fit_regressor(config, (x, train.labels), val_xy)
    model.norm_stats = stats
    return model


# --------------------------------------------------------------------------- tables

@dataclass
class Table:
    columns: list
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def stat_columns(kind: str) -> list:
    targets = JOINT_TARGETS if kind == "joint" else MEMBRANE_TARGETS
    return [f"{t}_{s}" for t in targets for s in ("mean", "std", "max")]


def stat_values(report: MetricReport) -> list:
    targets = JOINT_TARGETS if report.kind == "joint" else MEMBRANE_TARGETS
    return [getattr(report.stats[t], s) for t in targets for s in ("mean", "std", "max")]


def report_table(reports: Sequence[MetricReport]) -> Table:
    """One row per already-computed report."""
    kind = reports[0].kind
    return Table(["model", "kind", "n_test"] + stat_columns(kind),
                 [[r.model_id, r.kind, r.n_samples] + stat_values(r) for r in reports])


def compare_models(configs: Sequence[ModelConfig], parts: dict, uv_table=None, truth=None,
                   names: Sequence[str] | None = None) -> tuple[Table, list]:
    """Train every config on ``parts["train"]`` and evaluate on ``parts["test"]``."""
    test = parts["test"]
    names = list(names) if names is not None else [c.kind for c in configs]
    rows, reports = [], []
    for name, cfg in zip(names, configs):
        model = train_model(fit_config(cfg, parts["train"]), parts["train"], parts.get("validation"))
        rep = evaluate(model, test, uv_table, truth, model_id=name)
        reports.append(rep)
        rows.append([name, cfg.kind, rep.n_samples] + stat_values(rep))
    return Table(["model", "kind", "n_test"] + stat_columns(test.kind), rows), reports


@dataclass
class AblationSpec:
    """Named sensor-channel subsets; each is retrained from scratch."""

    subsets: dict
    n_channels: int = 12

    def __post_init__(self):
        if not self.subsets:
            raise ValueError("ablation lists no subsets")
        for name, chans in self.subsets.items():
            chans = tuple(int(c) for c in chans)
            if not chans:
                raise ValueError(f"subset {name!r} is empty")
            if len(set(chans)) != len(chans):
                raise ValueError(f"subset {name!r} repeats a channel")
            if min(chans) < 0 or max(chans) >= self.n_channels:
                raise ValueError(f"subset {name!r} has channels outside 0..{self.n_channels - 1}")
            self.subsets[name] = chans

    @classmethod
    def from_json(cls, d: dict) -> "AblationSpec":
        return cls(dict(d["subsets"]), int(d.get("n_channels", 12)))


def membrane_ldr_ablation(per_module: int = 3) -> AblationSpec:
    """1..per_module LDRs in each of the four modules (channels are module-major, three each)."""
    return AblationSpec({f"{k}_ldr_per_module": tuple(3 * m + j for m in range(4) for j in range(k))
                         for k in range(1, per_module + 1)})


def joint_ldr_ablation() -> AblationSpec:
    """1..4 LDRs per bellow, plus all four LDRs of a single bellow (channels bellow-major)."""
    subsets = {f"{k}_ldr_per_bellow": tuple(4 * b + j for b in range(3) for j in range(k))
               for k in range(1, 5)}
    subsets["one_bellow"] = (0, 1, 2, 3)
    return AblationSpec(subsets)


def ablation(config: ModelConfig, parts: dict, spec: AblationSpec, uv_table=None,
             truth=None) -> tuple[Table, list]:
    rows, reports = [], []
    for name, chans in spec.subsets.items():
        sub = {role: ds.select_channels(chans) for role, ds in parts.items()}
        cfg = fit_config(config, sub["train"])
        model = train_model(cfg, sub["train"], sub.get("validation"))
        rep = evaluate(model, sub["test"], uv_table, truth, model_id=name)
        reports.append(rep)
        rows.append([name, len(chans), " ".join(map(str, chans))] + stat_values(rep))
    kind = parts["test"].kind
    return Table(["subset", "n_channels", "channels"] + stat_columns(kind), rows), reports


def resolution_study(parts: dict, uv_table, degree_list: Sequence, config: ModelConfig) -> Table:
    """Fitting residual and prediction error of one config per control-grid size."""
    rows = []
    for deg in degree_list:
        deg = tuple(int(d) for d in deg)
        relabelled = {r: relabel_membrane(ds, uv_table, deg) for r, ds in parts.items()}
        table = uv_table.with_degrees(deg)
        test = relabelled["test"]
        uv = table.lookup(test.marker_ids)
        fit_d = membrane_distances(test.labels, test.markers, uv, deg)
        model = train_model(fit_config(config, relabelled["train"]), relabelled["train"],
                            relabelled.get("validation"))
        rep = eval_membrane(model, test, table)
        rows.append([f"{deg[0] + 1}x{deg[1] + 1}", float(fit_d.mean()),
                     float(np.sqrt(np.mean(fit_d ** 2))), rep.mean("distance")])
    return Table(["grid", "fit_mean", "fit_rms", "prediction_mean"], rows)


# --------------------------------------------------------------------------- latency

def hardware_descriptor() -> str:
    return (f"{platform.machine()} {platform.processor() or 'unknown-cpu'} cpus={os.cpu_count()} "
            f"{platform.system()} {platform.release()} python={platform.python_version()} "
            f"numpy={np.__version__}")


@dataclass
class LatencyReport:
    n: int
    mean_s: float
    p50_s: float
    p95_s: float
    p99_s: float
    max_s: float
    rate_hz: float
    hardware: str

    def to_json(self) -> dict:
        return dict(vars(self))


def decode_output(raw: np.ndarray):
    """Joint transform for 12 values, square-grid Bézier surface otherwise."""
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if raw.size == 12:
        return decode_joint(raw)
    side = _grid_side(raw.size)
    return decode_membrane(raw, (side - 1, side - 1))


def latency_benchmark(model: Regressor, n_predictions: int = 1000, window: np.ndarray | None = None,
                      seed: int = 0) -> LatencyReport:
    """Single-threaded wall-clock cost of normalise + predict + decode for one window."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    if window is None:
        window = rng.uniform(0.0, 1.0, (cfg.window_len, cfg.n_channels))
    times = np.empty(n_predictions)
    with threadpool_limits(limits=1):
        for i in range(n_predictions):
            t0 = time.perf_counter()
            if model.norm_stats is not None:
                out = model.predict_readings(window)
            else:
                out = predict(model, window)
            decode_output(out)
            times[i] = time.perf_counter() - t0
    mean = float(times.mean())
    return LatencyReport(n_predictions, mean, *(float(np.percentile(times, q)) for q in (50, 95, 99)),
                         float(times.max()), 1.0 / mean, hardware_descriptor())
