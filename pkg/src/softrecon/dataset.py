"""Log ingestion, robot-frame alignment, stream synchronisation, windowing and labelling.

Sensor logs are 1 kHz CSV files (``t_us,s0,...,s11``); marker logs are
100 Hz CSV files (``t_us,<id>_x,<id>_y,<id>_z,...``, empty cell = occluded).
A window is the ``window_len`` consecutive sensor frames ending at the
sensor tick nearest a marker timestamp; flattened it is ordered
(step, sensor) with the oldest step first.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bezier import MarkerParamTable, SurfaceFitter
from .errors import (
    CollinearPoints,
    EmptyDataset,
    MissingMarker,
    NonMonotonicTime,
    ParseError,
    UnknownBatch,
)
from .geometry import PointSet, RigidTransform, solve_rigid_transform

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_SENSORS = 12
DEFAULT_WINDOW = 10
SYNC_TOL_US = 500
MAX_GAP_US = 1500
PERIOD_US = 1000
PERIOD_TOL_US = 100
ROLES = ("train", "validation", "test")


# --------------------------------------------------------------------------- logs

@dataclass
class SensorFrame:
    t: int
    readings: np.ndarray


@dataclass
class SensorLog:
    t_us: np.ndarray
    readings: np.ndarray

    def __len__(self):
        return len(self.t_us)

    def __iter__(self):
        for t, r in zip(self.t_us, self.readings):
            yield SensorFrame(int(t), r)

    @property
    def n_sensors(self) -> int:
        return self.readings.shape[1]


@dataclass
class MarkerFrame:
    t: int
    positions: dict
    complete: bool

    def point_set(self, ids: Sequence) -> PointSet:
        missing = [k for k in ids if k not in self.positions]
        if missing:
            raise MissingMarker(f"markers {missing} absent at t={self.t}")
        return PointSet(np.array([self.positions[k] for k in ids]), tuple(ids))


@dataclass
class MarkerLog:
    """``positions`` is (frames, markers, 3) with NaN rows for occluded markers."""

    t_us: np.ndarray
    ids: tuple
    positions: np.ndarray

    def __len__(self):
        return len(self.t_us)

    @property
    def complete(self) -> np.ndarray:
        return ~np.any(np.isnan(self.positions), axis=(1, 2))

    def frame(self, i: int) -> MarkerFrame:
        pos = {k: self.positions[i, j] for j, k in enumerate(self.ids)
               if not np.any(np.isnan(self.positions[i, j]))}
        return MarkerFrame(int(self.t_us[i]), pos, len(pos) == len(self.ids))

    def index_of(self, ids: Sequence) -> list[int]:
        lookup = {k: j for j, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in lookup]
        if missing:
            raise MissingMarker(f"markers {missing} not in log")
        return [lookup[k] for k in ids]


def _check_monotonic(t: np.ndarray, what: str):
    if len(t) > 1:
        bad = np.nonzero(np.diff(t) < 0)[0]
        if len(bad):
            raise NonMonotonicTime(f"{what}: timestamp decreases at data row {bad[0] + 2}")


def load_sensor_log(path, n_sensors: int | None = DEFAULT_SENSORS) -> SensorLog:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty sensor log", line=1) from None
        expected = 1 + (n_sensors if n_sensors is not None else len(header) - 1)
        if header[0] != "t_us" or len(header) != expected:
            raise ParseError(f"bad header {header!r}", line=1)
        t, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != expected:
                raise ParseError(f"expected {expected} fields, got {len(row)}", line=lineno)
            try:
                t.append(int(row[0]))
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    readings = np.array(rows, dtype=float).reshape(len(rows), expected - 1)
    if not np.all(np.isfinite(readings)):
        bad = int(np.nonzero(~np.all(np.isfinite(readings), axis=1))[0][0])
        raise ParseError("non-finite reading", line=bad + 2)
    t_arr = np.array(t, dtype=np.int64)
    _check_monotonic(t_arr, str(path))
    log.info("loaded %d sensor frames from %s", len(t_arr), path)
    return SensorLog(t_arr, readings)


def write_sensor_log(slog: SensorLog, path):
    n = slog.n_sensors
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["t_us"] + [f"s{i}" for i in range(n)]) + "\n")
        for t, r in zip(slog.t_us, slog.readings):
            fh.write(f"{int(t)}," + ",".join(f"{x:.9g}" for x in r) + "\n")


def load_marker_log(path) -> MarkerLog:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty marker log", line=1) from None
        if header[0] != "t_us" or (len(header) - 1) % 3:
            raise ParseError(f"bad header {header!r}", line=1)
        ids = []
        for j in range(1, len(header), 3):
            names = header[j:j + 3]
            base = names[0][:-2]
            if names != [f"{base}_x", f"{base}_y", f"{base}_z"]:
                raise ParseError(f"bad marker columns {names!r}", line=1)
            ids.append(base)
        t, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                t.append(int(row[0]))
                rows.append([float(x) if x != "" else np.nan for x in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    pos = np.array(rows, dtype=float).reshape(len(rows), len(ids), 3)
    t_arr = np.array(t, dtype=np.int64)
    _check_monotonic(t_arr, str(path))
    return MarkerLog(t_arr, tuple(ids), pos)


def write_marker_log(mlog: MarkerLog, path):
    cols = ["t_us"] + [f"{k}_{a}" for k in mlog.ids for a in "xyz"]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        flat = mlog.positions.reshape(len(mlog), -1)
        for t, r in zip(mlog.t_us, flat):
            fh.write(f"{int(t)}," + ",".join("" if np.isnan(x) else f"{x:.9g}" for x in r) + "\n")


# --------------------------------------------------------------------------- frames

def _frame_from_axes(origin, x, y, z) -> RigidTransform:
    r = np.vstack([x, y, z])
    return RigidTransform(r, -r @ origin)


def _upward_normal(points: np.ndarray) -> np.ndarray:
    centred = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centred)
    if s[0] == 0.0 or s[1] < 1e-9 * s[0]:
        raise CollinearPoints("reference markers are collinear")
    z = vt[2]
    return -z if z[2] < 0 else z


def align_joint_frame(markers: MarkerFrame, bottom_ids: Sequence, reference_id=None) -> RigidTransform:
    """World-to-robot transform from the bottom triangle.

    Origin at the triangle centroid, z along its upward normal, y towards
    the reference marker projected into the plane, x = y × z.
    """
    reference_id = bottom_ids[0] if reference_id is None else reference_id
    pts = markers.point_set(list(bottom_ids)).points
    ref = markers.point_set([reference_id]).points[0]
    origin = pts.mean(axis=0)
    z = _upward_normal(pts)
    y = ref - origin
    y = y - (y @ z) * z
    if np.linalg.norm(y) < 1e-9:
        raise CollinearPoints("reference marker lies on the frame normal")
    y /= np.linalg.norm(y)
    return _frame_from_axes(origin, np.cross(y, z), y, z)


def align_membrane_frame(markers: MarkerFrame, fixed_ids: Sequence) -> RigidTransform:
    """World-to-robot transform from the fixed frame markers.

    Origin at their centroid, z along the upward normal of their best-fit
    plane, x along the frame edge from ``fixed_ids[0]`` to ``fixed_ids[1]``.
    """
    if len(fixed_ids) < 3:
        raise ValueError("at least 3 fixed markers are required")
    pts = markers.point_set(list(fixed_ids)).points
    origin = pts.mean(axis=0)
    z = _upward_normal(pts)
    x = pts[1] - pts[0]
    x = x - (x @ z) * z
    if np.linalg.norm(x) < 1e-9:
        raise CollinearPoints("frame edge is parallel to the normal")
    x /= np.linalg.norm(x)
    return _frame_from_axes(origin, x, np.cross(z, x), z)


# --------------------------------------------------------------------------- sync

@dataclass
class SyncedSample:
    marker_frame: MarkerFrame
    window: SensorLog


@dataclass
class SyncResult:
    """Index form of synchronisation: marker row and last sensor row per kept sample."""

    marker_index: np.ndarray
    sensor_end: np.ndarray
    window_len: int
    drops: dict

    def __len__(self):
        return len(self.marker_index)

    def samples(self, sensors: SensorLog, markers: MarkerLog) -> Iterable[SyncedSample]:
        for f, j in zip(self.marker_index, self.sensor_end):
            sl = slice(j - self.window_len + 1, j + 1)
            yield SyncedSample(markers.frame(int(f)), SensorLog(sensors.t_us[sl], sensors.readings[sl]))


def nearest_windows(sensor_t: np.ndarray, query_t: np.ndarray, window_len: int = DEFAULT_WINDOW,
                    tol_us: int = SYNC_TOL_US, max_gap_us: int = MAX_GAP_US):
    """For each query time, the index of the last frame of its window and a drop cause.

    Causes: "" (kept), "no_sensor", "history", "gap" (an interval above
    ``max_gap_us``) or "jitter" (an interval outside 1 ms ± 0.1 ms).
    """
    sensor_t = np.asarray(sensor_t, dtype=np.int64)
    query_t = np.asarray(query_t, dtype=np.int64)
    n = len(sensor_t)
    causes = np.full(len(query_t), "", dtype=object)
    end = np.full(len(query_t), -1, dtype=np.int64)
    if n == 0:
        causes[:] = "no_sensor"
        return end, causes
    pos = np.searchsorted(sensor_t, query_t, side="left")
    lo = np.clip(pos - 1, 0, n - 1)
    hi = np.clip(pos, 0, n - 1)
    d_lo = np.abs(query_t - sensor_t[lo])
    d_hi = np.abs(sensor_t[hi] - query_t)
    nearest = np.where(d_hi < d_lo, hi, lo)
    dist = np.minimum(d_lo, d_hi)

    d = np.diff(sensor_t)
    gap = np.concatenate([[0], np.cumsum(d > max_gap_us)])
    jit = np.concatenate([[0], np.cumsum((np.abs(d - PERIOD_US) > PERIOD_TOL_US) & (d <= max_gap_us))])
    start = nearest - window_len + 1
    safe_start = np.clip(start, 0, None)
    n_gap = gap[nearest] - gap[safe_start]
    n_jit = jit[nearest] - jit[safe_start]

    causes[:] = ""
    causes[n_jit > 0] = "jitter"
    causes[n_gap > 0] = "gap"
    causes[start < 0] = "history"
    causes[dist > tol_us] = "no_sensor"
    end[:] = nearest
    return end, causes


def synchronize(sensors: SensorLog, markers: MarkerLog, window_len: int = DEFAULT_WINDOW,
                tol_us: int = SYNC_TOL_US, max_gap_us: int = MAX_GAP_US) -> SyncResult:
    end, causes = nearest_windows(sensors.t_us, markers.t_us, window_len, tol_us, max_gap_us)
    causes[~markers.complete] = "incomplete"
    keep = causes == ""
    drops = {c: int(np.sum(causes == c)) for c in ("incomplete", "no_sensor", "history", "gap", "jitter")}
    drops["kept"] = int(keep.sum())
    drops["total"] = len(markers)
    return SyncResult(np.nonzero(keep)[0], end[keep], window_len, drops)


# --------------------------------------------------------------------------- layouts & labels

@dataclass
class JointLayout:
    bottom_ids: tuple
    top_ids: tuple
    reference_id: str
    flat_reference: PointSet
    window_len: int = DEFAULT_WINDOW
    n_sensors: int = DEFAULT_SENSORS

    kind = "joint"

    @property
    def label_dim(self) -> int:
        return 12


@dataclass
class MembraneLayout:
    fixed_ids: tuple
    uv_table: MarkerParamTable
    window_len: int = DEFAULT_WINDOW
    n_sensors: int = DEFAULT_SENSORS

    kind = "membrane"

    @property
    def degrees(self) -> tuple[int, int]:
        return self.uv_table.degrees

    @property
    def label_dim(self) -> int:
        m, n = self.degrees
        return 3 * (m + 1) * (n + 1)


def layout_to_json(layout, split: dict | None = None) -> dict:
    d = {"format_version": FORMAT_VERSION, "kind": layout.kind,
         "window_len": layout.window_len, "n_sensors": layout.n_sensors}
    if layout.kind == "joint":
        d.update(bottom_ids=list(layout.bottom_ids), top_ids=list(layout.top_ids),
                 reference_id=layout.reference_id,
                 flat_reference={"ids": list(layout.flat_reference.ids),
                                 "points": layout.flat_reference.points.tolist()})
    else:
        d.update(fixed_ids=list(layout.fixed_ids), uv_table=layout.uv_table.to_json())
    if split is not None:
        d["split"] = dict(split)
    return d


def layout_from_json(d: dict):
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported layout format_version {d.get('format_version')}")
    common = dict(window_len=int(d.get("window_len", DEFAULT_WINDOW)),
                  n_sensors=int(d.get("n_sensors", DEFAULT_SENSORS)))
    if d["kind"] == "joint":
        ref = d["flat_reference"]
        return JointLayout(tuple(d["bottom_ids"]), tuple(d["top_ids"]), d["reference_id"],
                           PointSet(np.array(ref["points"]), tuple(ref["ids"])), **common)
    if d["kind"] == "membrane":
        table = MarkerParamTable.from_json(d["uv_table"])
        if "degrees" in d:
            table = table.with_degrees(d["degrees"])
        return MembraneLayout(tuple(d["fixed_ids"]), table, **common)
    raise ValueError(f"unknown layout kind {d['kind']!r}")


@dataclass
class WindowedSample:
    input: np.ndarray
    label: np.ndarray
    kind: str


def flatten_window(readings: np.ndarray) -> np.ndarray:
    """(steps, sensors) -> (steps * sensors,), oldest step first."""
    return np.asarray(readings, dtype=float).reshape(-1)


def joint_label(frame: MarkerFrame, layout: JointLayout) -> RigidTransform:
    to_robot = align_joint_frame(frame, layout.bottom_ids, layout.reference_id)
    top = frame.point_set(layout.flat_reference.ids)
    top = PointSet(to_robot.apply(top.points), top.ids)
    return solve_rigid_transform(layout.flat_reference, top)


def label_joint(sample: SyncedSample, layout: JointLayout) -> WindowedSample:
    t = joint_label(sample.marker_frame, layout)
    return WindowedSample(flatten_window(sample.window.readings), t.as_vector(), "joint")


def membrane_markers(frame: MarkerFrame, layout: MembraneLayout) -> PointSet:
    to_robot = align_membrane_frame(frame, layout.fixed_ids)
    pts = frame.point_set(layout.uv_table.ids)
    return PointSet(to_robot.apply(pts.points), pts.ids)


def label_membrane(sample: SyncedSample, layout: MembraneLayout) -> WindowedSample:
    pts = membrane_markers(sample.marker_frame, layout)
    fitter = SurfaceFitter(layout.uv_table.uv, layout.degrees)
    c = fitter.solve(pts.points)
    return WindowedSample(flatten_window(sample.window.readings), c.reshape(-1), "membrane")


# --------------------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """Windowed samples in array form.

    ``inputs`` is (N, steps, channels) raw readings, ``labels`` (N, K);
    membrane datasets also keep robot-frame markers (N, M, 3).
    """

    kind: str
    inputs: np.ndarray
    labels: np.ndarray
    batch: np.ndarray
    t_us: np.ndarray
    markers: np.ndarray | None = None
    marker_ids: tuple = ()
    degrees: tuple | None = None
    channels: tuple = tuple(range(DEFAULT_SENSORS))

    def __len__(self):
        return len(self.labels)

    @property
    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(len(self.inputs), -1)

    def sample(self, i: int) -> WindowedSample:
        return WindowedSample(self.inputs[i].reshape(-1), self.labels[i], self.kind)

    def take(self, idx) -> "Dataset":
        return Dataset(self.kind, self.inputs[idx], self.labels[idx], self.batch[idx], self.t_us[idx],
                       None if self.markers is None else self.markers[idx], self.marker_ids,
                       self.degrees, self.channels)

    def select_channels(self, channels: Sequence[int]) -> "Dataset":
        """Rebuild windows with a subset of sensor channels."""
        channels = list(channels)
        if not channels:
            raise ValueError("channel subset must be nonempty")
        pos = {c: i for i, c in enumerate(self.channels)}
        bad = [c for c in channels if c not in pos]
        if bad:
            raise ValueError(f"channels {bad} not present")
        d = self.take(slice(None))
        d.inputs = np.ascontiguousarray(self.inputs[:, :, [pos[c] for c in channels]])
        d.channels = tuple(channels)
        return d

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if p is not None]
        if not parts:
            raise EmptyDataset("nothing to concatenate")
        first = parts[0]
        markers = None if first.markers is None else np.concatenate([p.markers for p in parts])
        return cls(first.kind, np.concatenate([p.inputs for p in parts]),
                   np.concatenate([p.labels for p in parts]), np.concatenate([p.batch for p in parts]),
                   np.concatenate([p.t_us for p in parts]), markers, first.marker_ids, first.degrees,
                   first.channels)


def build_dataset(sensors: SensorLog, markers: MarkerLog, layout, batch: str,
                  sync: SyncResult | None = None) -> tuple[Dataset, dict]:
    """Synchronise, align and label every usable marker frame of one batch."""
    if sync is None:
        sync = synchronize(sensors, markers, layout.window_len)
    drops = dict(sync.drops)
    w = layout.window_len
    steps = np.arange(-w + 1, 1)
    inputs = sensors.readings[sync.sensor_end[:, None] + steps[None, :]]
    kept, labels, robot_markers = [], [], []
    failures = 0
    if layout.kind == "joint":
        for row, f in enumerate(sync.marker_index):
            try:
                labels.append(joint_label(markers.frame(int(f)), layout).as_vector())
                kept.append(row)
            except CollinearPoints:
                failures += 1
    else:
        fitter = SurfaceFitter(layout.uv_table.uv, layout.degrees)
        for row, f in enumerate(sync.marker_index):
            try:
                pts = membrane_markers(markers.frame(int(f)), layout)
            except CollinearPoints:
                failures += 1
                continue
            robot_markers.append(pts.points)
            kept.append(row)
        if robot_markers:
            labels = list(fitter.solve(np.array(robot_markers)).reshape(len(robot_markers), -1))
    drops["degenerate"] = failures
    drops["kept"] = len(kept)
    kept = np.array(kept, dtype=np.int64)
    k = layout.label_dim
    ds = Dataset(
        layout.kind, inputs[kept] if len(kept) else np.zeros((0, w, sensors.n_sensors)),
        np.array(labels).reshape(len(kept), k),
        np.full(len(kept), batch, dtype=object),
        markers.t_us[sync.marker_index[kept]] if len(kept) else np.zeros(0, dtype=np.int64),
        np.array(robot_markers).reshape(len(kept), -1, 3) if layout.kind == "membrane" else None,
        layout.uv_table.ids if layout.kind == "membrane" else (),
        layout.degrees if layout.kind == "membrane" else None,
        tuple(range(sensors.n_sensors)),
    )
    return ds, drops


def relabel_membrane(ds: Dataset, table: MarkerParamTable, degrees) -> Dataset:
    """Refit control grids of a membrane dataset at other degrees."""
    fitter = SurfaceFitter(table.lookup(ds.marker_ids), tuple(degrees))
    out = ds.take(slice(None))
    out.labels = fitter.solve(ds.markers).reshape(len(ds), -1)
    out.degrees = tuple(degrees)
    return out


# --------------------------------------------------------------------------- split

@dataclass
class SplitSpec:
    """Batch name -> role ("train", "validation" or "test")."""

    roles: dict

    def __post_init__(self):
        roles = {}
        for b, r in dict(self.roles).items():
            if isinstance(r, (list, tuple)):
                if len(r) != 1:
                    raise ValueError(f"batch {b!r} given roles {list(r)}; roles must map to distinct batches")
                r = r[0]
            if r not in ROLES:
                raise ValueError(f"batch {b!r} has unknown role {r!r}")
            roles[b] = r
        self.roles = roles

    @classmethod
    def from_json(cls, d: dict) -> "SplitSpec":
        return cls(dict(d))


def split(samples: Dataset, spec: SplitSpec) -> dict:
    """Assign whole batches to roles; windows never cross batches."""
    batches = list(dict.fromkeys(samples.batch.tolist()))
    unknown = [b for b in batches if b not in spec.roles]
    if unknown:
        raise UnknownBatch(f"batches {unknown} have no role")
    out = {}
    for role in ROLES:
        mask = np.array([spec.roles[b] == role for b in samples.batch], dtype=bool)
        out[role] = samples.take(np.nonzero(mask)[0])
    return out


def validate_split_roles(spec: SplitSpec, required=ROLES):
    """Every required role must be backed by at least one batch."""
    missing = [r for r in required if r not in spec.roles.values()]
    if missing:
        raise ValueError(f"roles {missing} have no batch; each role needs a batch of its own")


# --------------------------------------------------------------------------- normalisation

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.constant is None:
            self.constant = ~(self.std > 0)
        self.constant = np.asarray(self.constant, dtype=bool)

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, "mean": self.mean.tolist(),
                "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported norm stats format_version {d.get('format_version')}")
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["constant"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def select(self, channels: Sequence[int]) -> "NormStats":
        idx = list(channels)
        return NormStats(self.mean[idx], self.std[idx], self.constant[idx])


def fit_normalizer(train: Dataset) -> NormStats:
    if len(train) == 0:
        raise EmptyDataset("cannot fit normaliser on an empty training set")
    x = train.inputs.reshape(-1, train.inputs.shape[-1])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    if np.any(constant):
        log.warning("constant sensor channels: %s", np.nonzero(constant)[0].tolist())
    return NormStats(mean, std, constant)


def normalize_inputs(stats: NormStats, x: np.ndarray) -> np.ndarray:
    """z-score the last axis (channels); constant channels map to 0."""
    scale = np.where(stats.constant, 1.0, stats.std)
    z = (np.asarray(x, dtype=float) - stats.mean) / scale
    return np.where(stats.constant, 0.0, z)


def denormalize_inputs(stats: NormStats, z: np.ndarray) -> np.ndarray:
    scale = np.where(stats.constant, 1.0, stats.std)
    return np.asarray(z, dtype=float) * scale + stats.mean


def apply_normalizer(stats: NormStats, samples: Dataset) -> Dataset:
    out = samples.take(slice(None))
    out.inputs = normalize_inputs(stats, samples.inputs)
    return out


# --------------------------------------------------------------------------- archive

def _fmt(x: float) -> str:
    return repr(float(x))


def write_archive(out_dir, parts: dict, stats: NormStats, meta: dict):
    """One CSV per role plus ``norm_stats.json`` and ``dataset.json``."""
    os.makedirs(out_dir, exist_ok=True)
    for role, ds in parts.items():
        n_in = ds.inputs.shape[1] * ds.inputs.shape[2]
        k = ds.labels.shape[1]
        with open(os.path.join(out_dir, f"{role}.csv"), "w", newline="\n", encoding="utf-8") as fh:
            fh.write(",".join(["batch", "t_us"] + [f"in{i}" for i in range(n_in)]
                              + [f"lab{i}" for i in range(k)]) + "\n")
            flat = ds.flat_inputs
            for i in range(len(ds)):
                fh.write(f"{ds.batch[i]},{int(ds.t_us[i])},"
                         + ",".join(map(_fmt, flat[i])) + "," + ",".join(map(_fmt, ds.labels[i])) + "\n")
        if ds.markers is not None:
            with open(os.path.join(out_dir, f"{role}_markers.csv"), "w", newline="\n",
                      encoding="utf-8") as fh:
                fh.write(",".join(["batch", "t_us"] + [f"{m}_{a}" for m in ds.marker_ids for a in "xyz"])
                         + "\n")
                flat_m = ds.markers.reshape(len(ds), -1)
                for i in range(len(ds)):
                    fh.write(f"{ds.batch[i]},{int(ds.t_us[i])}," + ",".join(map(_fmt, flat_m[i])) + "\n")
    with open(os.path.join(out_dir, "norm_stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats.to_json(), fh, indent=2)
    meta = dict(meta, format_version=FORMAT_VERSION)
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        batch, t, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            batch.append(row[0])
            t.append(int(row[1]))
            rows.append([float(x) for x in row[2:]])
    return header, np.array(batch, dtype=object), np.array(t, dtype=np.int64), np.array(rows, dtype=float)


def read_archive(out_dir, roles: Sequence[str] = ROLES) -> tuple[dict, NormStats, dict]:
    with open(os.path.join(out_dir, "dataset.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {meta.get('format_version')}")
    with open(os.path.join(out_dir, "norm_stats.json"), encoding="utf-8") as fh:
        stats = NormStats.from_json(json.load(fh))
    w, c = meta["window_len"], len(meta["channels"])
    parts = {}
    for role in roles:
        path = os.path.join(out_dir, f"{role}.csv")
        if not os.path.exists(path):
            continue
        header, batch, t, rows = _read_table(path)
        n_in = w * c
        rows = rows.reshape(len(batch), len(header) - 2)
        markers = None
        mpath = os.path.join(out_dir, f"{role}_markers.csv")
        if os.path.exists(mpath):
            _, _, _, mrows = _read_table(mpath)
            markers = mrows.reshape(len(batch), -1, 3)
        degrees = tuple(meta["degrees"]) if meta.get("degrees") else None
        parts[role] = Dataset(meta["kind"], rows[:, :n_in].reshape(-1, w, c), rows[:, n_in:], batch, t,
                              markers, tuple(meta.get("marker_ids", ())), degrees, tuple(meta["channels"]))
    return parts, stats, meta
