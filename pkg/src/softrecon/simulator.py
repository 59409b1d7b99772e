"""Synthetic stand-in for the physical robots and the motion-capture rig.

Two generators produce ground truth, 100 Hz marker streams and 1 kHz
light-sensor streams:

* ``gen_joint``: a three-bellow continuum joint whose top frame follows a
  slerped spline through random way-poses; each bellow holds 4 LDRs
  facing an LED cluster on the top frame.
* ``gen_membrane``: a 2x2 array of inflatable modules under one membrane,
  represented by a degree-(4, 4) Bézier grid; each module holds 3 LDRs
  that see the local membrane height.

Sensor response per channel::

    reading = clamp(gain * (d0 / d)**p * cos(incidence)**q
                    + leakage * mean(other chamber features) + bias + noise, 0, 1)

followed by an optional first-order lag. Everything is a deterministic
function of the scenario and its seeds.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.signal import lfilter

from .bezier import assign_uv, design_matrix
from .dataset import (
    JointLayout,
    MarkerLog,
    MembraneLayout,
    SensorLog,
    layout_to_json,
    write_marker_log,
    write_sensor_log,
)
from .geometry import PointSet, RigidTransform, quaternions_to_rotations, rotation_to_quaternion, tait_bryan_to_rotation

SCENARIO_FORMAT_VERSION = 1
SENSOR_PERIOD_US = 1000
MARKER_PERIOD_US = 10000

# Joint geometry (mm, robot frame: bottom triangle centroid at origin).
JOINT_HEIGHT = 80.0
JOINT_MARKER_RADIUS = 60.0
BELLOW_RADIUS = 38.0
LDR_RING = 14.0
LED_RING = 8.0
BELLOW_ANGLES = (90.0, 210.0, 330.0)

# Membrane geometry.
MEMBRANE_HALF = 60.0
FRAME_HALF = 75.0
MODULE_CENTRES = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))
LDR_OFFSET_UV = 0.13
LDR_DEPTH = 25.0
MARKER_GRID = 7


@dataclass
class SensorModel:
    gain: np.ndarray
    bias: np.ndarray
    exponent: float = 2.0
    incidence_power: float = 4.0
    leakage: float = 0.03
    lag_ms: float = 0.0
    noise: float = 0.005
    d0: float = 1.0

    @classmethod
    def default(cls, n: int, d0: float, hardware_seed: int = 0, **kw) -> "SensorModel":
        rng = np.random.default_rng([hardware_seed, 7919])
        return cls(gain=rng.uniform(0.4, 0.6, n), bias=rng.uniform(0.02, 0.08, n), d0=d0, **kw)

    def respond(self, distance: np.ndarray, incidence_cos: np.ndarray, neighbour: np.ndarray,
                gain_scale=1.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Readings (T, C) from per-channel distance, incidence cosine and neighbour feature."""
        raw = (self.gain * gain_scale * (self.d0 / distance) ** self.exponent
               * np.clip(incidence_cos, 0.0, 1.0) ** self.incidence_power
               + self.leakage * neighbour + self.bias)
        if self.lag_ms > 0:
            alpha = 1.0 - math.exp(-SENSOR_PERIOD_US / 1000.0 / self.lag_ms)
            zi = (1.0 - alpha) * raw[0]
            raw = lfilter([alpha], [1.0, -(1.0 - alpha)], raw, axis=0, zi=zi[None, :])[0]
        if rng is not None and self.noise > 0:
            raw = raw + rng.normal(0.0, self.noise, raw.shape)
        return np.clip(raw, 0.0, 1.0)


@dataclass
class Placement:
    """Robot-to-world transform of the rig for one capture batch."""

    yaw_deg: float = 0.0
    tilt_deg: float = 0.0
    offset_mm: tuple = (0.0, 0.0, 0.0)

    def transform(self) -> RigidTransform:
        r = tait_bryan_to_rotation(self.yaw_deg, self.tilt_deg, 0.5 * self.tilt_deg)
        return RigidTransform(r, np.asarray(self.offset_mm, dtype=float))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Placement":
        return cls(float(rng.uniform(-180, 180)), float(rng.uniform(-5, 5)),
                   tuple(float(x) for x in rng.uniform([-800, -800, 600], [800, 800, 1200])))


@dataclass
class JointScenario:
    duration_s: float = 10.0
    seed: int = 0
    hardware_seed: int = 0
    waypoint_interval_s: float = 0.8
    yaw_max_deg: float = 8.0
    tilt_max_deg: float = 30.0
    elongation_mm: tuple = (0.0, 10.0)
    loads_g: tuple = (0.0,)
    load_interval_s: float = 4.0
    sag_mm_per_kg: float = 6.0
    load_gain_shift: float = 0.01
    marker_noise_mm: float = 0.2
    sensor_noise: float = 0.005
    lag_ms: float = 1.0
    occlusion: float = 0.0
    placement: Placement | None = None
    static: bool = False
    # Optional commanded way-poses (t_s, yaw, pitch, roll, elongation_mm); random when None.
    way_poses: tuple | None = None

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.tilt_max_deg > 45 or self.yaw_max_deg > 45:
            raise ValueError("rotation bounds exceed 45 degrees")
        if isinstance(self.placement, dict):
            self.placement = Placement(**self.placement)
        if self.way_poses is not None:
            wp = np.asarray(self.way_poses, dtype=float)
            if wp.ndim != 2 or wp.shape[1] != 5 or len(wp) < 2:
                raise ValueError("way_poses must be at least two rows of (t, yaw, pitch, roll, elongation)")
            if np.any(np.diff(wp[:, 0]) <= 0):
                raise ValueError("way_pose times must increase")
            if np.any(np.abs(wp[:, 2:4]) > 45):
                raise ValueError("way_pose pitch/roll exceed 45 degrees")


@dataclass
class MembraneScenario:
    duration_s: float = 10.0
    seed: int = 0
    hardware_seed: int = 0
    segment_s: tuple = (0.3, 1.2)
    coupling: tuple = ((0.85, 0.15, 0.15, 0.0), (0.15, 0.85, 0.0, 0.15),
                       (0.15, 0.0, 0.85, 0.15), (0.0, 0.15, 0.15, 0.85))
    max_height_mm: float = 12.0
    saturation: float = 1.5
    bulge_width: float = 0.16
    bulge_drift: float = 0.07
    drift_segment_s: tuple = (0.5, 2.0)
    marker_noise_mm: float = 0.2
    sensor_noise: float = 0.005
    lag_ms: float = 1.0
    occlusion: float = 0.0
    placement: Placement | None = None
    pressures: tuple | None = None  # constant per-module pressures; None = random waveforms
    degrees: tuple = (4, 4)

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        c = np.asarray(self.coupling, dtype=float)
        if c.shape != (4, 4):
            raise ValueError("coupling matrix must be 4x4")
        rows = c.sum(axis=1)
        if np.any(rows < 0.5) or np.any(rows > 2.0):
            raise ValueError("coupling rows must sum to within [0.5, 2]")
        if self.pressures is not None and not all(0.0 <= p <= 1.0 for p in self.pressures):
            raise ValueError("pressures must lie in [0, 1]")
        if isinstance(self.placement, dict):
            self.placement = Placement(**self.placement)


@dataclass
class Streams:
    """Simulator output for one batch."""

    kind: str
    sensors: SensorLog
    markers: MarkerLog
    truth_t_us: np.ndarray
    truth: np.ndarray
    layout: object
    extras: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- helpers

def _timebase(duration_s: float):
    n_s = int(round(duration_s * 1e6 / SENSOR_PERIOD_US))
    t_s = np.arange(n_s, dtype=np.int64) * SENSOR_PERIOD_US
    n_m = int(math.ceil(n_s * SENSOR_PERIOD_US / MARKER_PERIOD_US))
    t_m = np.arange(n_m, dtype=np.int64) * MARKER_PERIOD_US
    return t_s, t_m


def _ease(t):
    return t * t * (3.0 - 2.0 * t)


def _knots(rng, duration_s, lo, hi):
    """Knot times from 0 past ``duration_s`` with random spacing in [lo, hi]."""
    ts = [0.0]
    while ts[-1] <= duration_s:
        ts.append(ts[-1] + float(rng.uniform(lo, hi)))
    return np.array(ts)


def _segment_interp(knot_t, t):
    seg = np.clip(np.searchsorted(knot_t, t, side="right") - 1, 0, len(knot_t) - 2)
    local = (t - knot_t[seg]) / (knot_t[seg + 1] - knot_t[seg])
    return seg, _ease(np.clip(local, 0.0, 1.0))


def _eased_signal(rng, duration_s, t, lo, hi, n, span=(0.0, 1.0)):
    knot_t = _knots(rng, duration_s, lo, hi)
    vals = rng.uniform(span[0], span[1], size=(len(knot_t), n))
    seg, w = _segment_interp(knot_t, t)
    return vals[seg] * (1 - w)[:, None] + vals[seg + 1] * w[:, None]


def _slerp_many(q0, q1, t):
    dot = np.sum(q0 * q1, axis=1)
    q1 = np.where(dot[:, None] < 0, -q1, q1)
    dot = np.abs(dot)
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    so = np.sin(omega)
    small = so < 1e-6
    so_safe = np.where(small, 1.0, so)
    a = np.where(small, 1.0 - t, np.sin((1.0 - t) * omega) / so_safe)
    b = np.where(small, t, np.sin(t * omega) / so_safe)
    q = a[:, None] * q0 + b[:, None] * q1
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _apply_noise_and_occlusion(pos, rng, noise, occlusion):
    if noise > 0:
        pos = pos + rng.normal(0.0, noise, pos.shape)
    if occlusion > 0:
        hidden = rng.random(pos.shape[:2]) < occlusion
        pos = pos.copy()
        pos[hidden] = np.nan
    return pos


# --------------------------------------------------------------------------- joint

def joint_marker_layout():
    ang = np.radians(BELLOW_ANGLES)
    bottom = np.column_stack([JOINT_MARKER_RADIUS * np.cos(ang), JOINT_MARKER_RADIUS * np.sin(ang),
                              np.zeros(3)])
    top_ang = ang + np.radians(60.0)
    top = np.column_stack([JOINT_MARKER_RADIUS * np.cos(top_ang), JOINT_MARKER_RADIUS * np.sin(top_ang),
                           np.full(3, JOINT_HEIGHT)])
    bottom_ids = ("B0", "B1", "B2")
    top_ids = ("T0", "T1", "T2")
    layout = JointLayout(bottom_ids, top_ids, "B0", PointSet(top, top_ids))
    return layout, bottom, top


def _joint_sensor_geometry():
    """LDR positions (12, 3) on the bottom frame and LED cluster centres (3, 3) on the neutral top."""
    ldr, led = [], []
    for k, a in enumerate(np.radians(BELLOW_ANGLES)):
        centre = np.array([BELLOW_RADIUS * math.cos(a), BELLOW_RADIUS * math.sin(a), 0.0])
        for j in range(4):
            phi = a + j * math.pi / 2
            ldr.append(centre + [LDR_RING * math.cos(phi), LDR_RING * math.sin(phi), 0.0])
        for e in range(3):
            phi = a + math.pi / 6 + e * 2 * math.pi / 3
            led.append(centre + [LED_RING * math.cos(phi), LED_RING * math.sin(phi), JOINT_HEIGHT])
    return np.array(ldr), np.array(led).reshape(3, 3, 3)


def joint_poses(scn: JointScenario, t_us: np.ndarray, rng: np.random.Generator, loads: np.ndarray):
    """Rotations (T, 3, 3) and translations (T, 3) of the top frame at times ``t_us``."""
    t = t_us / 1e6
    if scn.static:
        rot = np.broadcast_to(np.eye(3), (len(t), 3, 3)).copy()
        trans = np.zeros((len(t), 3))
    else:
        if scn.way_poses is not None:
            knot_t, yaw, pitch, roll, elong = np.asarray(scn.way_poses, dtype=float).T
        else:
            knot_t = _knots(rng, scn.duration_s, 0.6 * scn.waypoint_interval_s, 1.4 * scn.waypoint_interval_s)
            k = len(knot_t)
            yaw = rng.uniform(-scn.yaw_max_deg, scn.yaw_max_deg, k)
            pitch = rng.uniform(-scn.tilt_max_deg, scn.tilt_max_deg, k)
            roll = rng.uniform(-scn.tilt_max_deg, scn.tilt_max_deg, k)
            elong = rng.uniform(*scn.elongation_mm, k)
        quats = np.array([rotation_to_quaternion(tait_bryan_to_rotation(y, p, r))
                          for y, p, r in zip(yaw, pitch, roll)])
        seg, w = _segment_interp(knot_t, t)
        rot = quaternions_to_rotations(_slerp_many(quats[seg], quats[seg + 1], w))
        e = elong[seg] * (1 - w) + elong[seg + 1] * w
        pivot = np.array([0.0, 0.0, JOINT_HEIGHT / 2])
        trans = pivot - rot @ pivot + np.column_stack([np.zeros_like(e), np.zeros_like(e), e])
    # Load sags the top frame downwards and along its tilt direction.
    kg = loads / 1000.0
    tilt_dir = rot[:, :2, 2]
    trans = trans.copy()
    trans[:, :2] += scn.sag_mm_per_kg * kg[:, None] * tilt_dir * 2.0
    trans[:, 2] -= scn.sag_mm_per_kg * kg
    return rot, trans


def _load_schedule(scn: JointScenario, t_us, rng):
    t = t_us / 1e6
    n_seg = int(math.ceil(scn.duration_s / scn.load_interval_s)) + 1
    picks = rng.choice(np.asarray(scn.loads_g, dtype=float), size=n_seg)
    return picks[np.minimum((t // scn.load_interval_s).astype(int), n_seg - 1)]


def gen_joint(scn: JointScenario) -> Streams:
    rng = np.random.default_rng([scn.seed, 1])
    t_s, t_m = _timebase(scn.duration_s)
    placement = scn.placement or Placement.random(np.random.default_rng([scn.seed, 2]))
    world = placement.transform()
    layout, bottom, top = joint_marker_layout()

    loads_s = _load_schedule(scn, t_s, rng)
    rot, trans = joint_poses(scn, t_s, rng, loads_s)

    ldr, led = _joint_sensor_geometry()
    led_pos = np.einsum("tij,kej->tkei", rot, led) + trans[:, None, None, :]  # (T, 3, 3, 3)
    bellow = np.repeat(np.arange(3), 4)
    diff = led_pos[:, bellow] - ldr[None, :, None, :]  # (T, 12, 3 LEDs, 3)
    dist = np.linalg.norm(diff, axis=-1)
    cosi = diff[..., 2] / dist
    model = SensorModel.default(12, JOINT_HEIGHT, scn.hardware_seed, lag_ms=scn.lag_ms,
                                noise=scn.sensor_noise)
    # Sum over the three LEDs of a bellow; each term follows the shared response law.
    per_led = (model.d0 / dist) ** model.exponent * np.clip(cosi, 0, 1) ** model.incidence_power
    intensity = per_led.mean(axis=2)
    equiv_dist = model.d0 * intensity ** (-1.0 / model.exponent)
    length = np.linalg.norm(led_pos.mean(axis=2) - ldr.reshape(3, 4, 3).mean(axis=1), axis=-1)
    feat = (length - JOINT_HEIGHT) / 10.0
    neighbour = np.stack([(feat.sum(axis=1) - feat[:, k]) / 2.0 for k in bellow], axis=1)
    gain_scale = (1.0 - scn.load_gain_shift * loads_s / 500.0)[:, None]
    readings = model.respond(equiv_dist, np.ones_like(equiv_dist), neighbour, gain_scale, rng)

    # Marker stream at 100 Hz, sampled from the same pose trajectory.
    idx_m = t_m // SENSOR_PERIOD_US
    top_pos = np.einsum("tij,kj->tki", rot[idx_m], top) + trans[idx_m][:, None, :]
    robot = np.concatenate([np.broadcast_to(bottom, (len(t_m), 3, 3)), top_pos], axis=1)
    world_pos = robot @ world.rotation.T + world.translation
    world_pos = _apply_noise_and_occlusion(world_pos, rng, scn.marker_noise_mm, scn.occlusion)
    ids = layout.bottom_ids + layout.top_ids
    truth = np.concatenate([rot[idx_m].reshape(-1, 9), trans[idx_m]], axis=1)
    return Streams("joint", SensorLog(t_s, readings), MarkerLog(t_m, ids, world_pos), t_m, truth, layout,
                   {"loads_g": loads_s[idx_m], "placement": placement})


# --------------------------------------------------------------------------- membrane

def membrane_marker_uv(grid=MARKER_GRID):
    ids = tuple(f"M{r}{c}" for r in range(grid) for c in range(grid))
    uv = np.array([[c / (grid - 1), r / (grid - 1)] for r in range(grid) for c in range(grid)])
    return ids, uv


def membrane_ldr_uv():
    """(12, 2) LDR locations in uv, three per module, module-major."""
    out = []
    for cu, cv in MODULE_CENTRES:
        for j in range(3):
            phi = math.pi / 2 + j * 2 * math.pi / 3
            out.append([cu + LDR_OFFSET_UV * math.cos(phi), cv + LDR_OFFSET_UV * math.sin(phi)])
    return np.array(out)


def membrane_frame_markers():
    h = FRAME_HALF
    ids = ("F0", "F1", "F2", "F3")
    return ids, np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


def flat_control_grid(degrees=(4, 4)) -> np.ndarray:
    m, n = degrees
    u = np.arange(m + 1) / m
    v = np.arange(n + 1) / n
    uu, vv = np.meshgrid(u, v, indexing="ij")
    c = np.zeros((m + 1, n + 1, 3))
    c[..., 0] = -MEMBRANE_HALF + 2 * MEMBRANE_HALF * uu
    c[..., 1] = -MEMBRANE_HALF + 2 * MEMBRANE_HALF * vv
    return c


_FIELD_RES = 21
_CHUNK = 8192


def membrane_heights(scn: MembraneScenario, pressures: np.ndarray, drift: np.ndarray) -> np.ndarray:
    """Control-point heights (T, m+1, n+1) from module pressures (T, 4) and bulge drift (T, 4, 2).

    The membrane height field is a sum of saturating Gaussian bulges, one
    per module, tapered to zero at the clamped boundary; it is projected
    onto the Bézier space by least squares on a dense uv grid.
    """
    m, n = scn.degrees
    c = np.asarray(scn.coupling, dtype=float)
    effective = pressures @ c.T
    amp = scn.max_height_mm * np.tanh(scn.saturation * effective) / math.tanh(scn.saturation)
    g = np.linspace(0.0, 1.0, _FIELD_RES)
    uu, vv = (a.reshape(-1) for a in np.meshgrid(g, g, indexing="ij"))
    taper = 16.0 * uu * (1 - uu) * vv * (1 - vv)
    project = np.linalg.pinv(design_matrix(np.column_stack([uu, vv]), m, n))
    out = np.empty((len(pressures), (m + 1) * (n + 1)))
    for lo in range(0, len(pressures), _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        field_ = np.zeros((len(amp[sl]), len(uu)))
        for k, (cu, cv) in enumerate(MODULE_CENTRES):
            du = uu[None] - (cu + drift[sl, k, 0])[:, None]
            dv = vv[None] - (cv + drift[sl, k, 1])[:, None]
            field_ += amp[sl, k, None] * np.exp(-(du * du + dv * dv) / (2 * scn.bulge_width ** 2))
        out[sl] = (field_ * taper) @ project.T
    return out.reshape(len(pressures), m + 1, n + 1)


def membrane_layout(degrees=(4, 4)):
    ids, uv = membrane_marker_uv()
    fixed_ids, _ = membrane_frame_markers()
    flat = np.column_stack([-MEMBRANE_HALF + 2 * MEMBRANE_HALF * uv, np.zeros(len(uv))])
    table = assign_uv(PointSet(flat, ids), degrees=degrees)
    return MembraneLayout(fixed_ids, table), flat


def gen_membrane(scn: MembraneScenario) -> Streams:
    rng = np.random.default_rng([scn.seed, 3])
    t_s, t_m = _timebase(scn.duration_s)
    placement = scn.placement or Placement.random(np.random.default_rng([scn.seed, 4]))
    world = placement.transform()
    t = t_s / 1e6
    if scn.pressures is not None:
        pressures = np.tile(np.asarray(scn.pressures, dtype=float), (len(t), 1))
        drift = np.zeros((len(t), 4, 2))
    else:
        pressures = _eased_signal(rng, scn.duration_s, t, *scn.segment_s, 4)
        # Some segments fully vent a module so the flat state is well covered.
        pressures = np.clip(1.25 * pressures - 0.15, 0.0, 1.0)
        drift = _eased_signal(rng, scn.duration_s, t, *scn.drift_segment_s, 8, span=(-1, 1))
        drift = scn.bulge_drift * drift.reshape(-1, 4, 2)

    m, n = scn.degrees
    flat = flat_control_grid(scn.degrees)
    heights = membrane_heights(scn, pressures, drift)

    ldr_uv = membrane_ldr_uv()
    basis = design_matrix(ldr_uv, m, n)  # (12, (m+1)(n+1))
    h_ldr = heights.reshape(len(t), -1) @ basis.T
    model = SensorModel.default(12, LDR_DEPTH, scn.hardware_seed, lag_ms=scn.lag_ms,
                                noise=scn.sensor_noise, incidence_power=0.0)
    dist = LDR_DEPTH + h_ldr
    feat = h_ldr.reshape(-1, 4, 3).mean(axis=2) / max(scn.max_height_mm, 1e-9)
    module = np.repeat(np.arange(4), 3)
    neighbour = np.stack([(feat.sum(axis=1) - feat[:, k]) / 3.0 for k in module], axis=1)
    readings = model.respond(dist, np.ones_like(dist), neighbour, 1.0, rng)

    idx_m = t_m // SENSOR_PERIOD_US
    ctrl = np.broadcast_to(flat, (len(t_m),) + flat.shape).copy()
    ctrl[..., 2] = heights[idx_m]
    ids, uv = membrane_marker_uv()
    mbasis = design_matrix(uv, m, n)
    surf = np.einsum("kp,fpc->fkc", mbasis, ctrl.reshape(len(t_m), -1, 3))
    fixed_ids, frame = membrane_frame_markers()
    robot = np.concatenate([np.broadcast_to(frame, (len(t_m), 4, 3)), surf], axis=1)
    world_pos = robot @ world.rotation.T + world.translation
    world_pos = _apply_noise_and_occlusion(world_pos, rng, scn.marker_noise_mm, scn.occlusion)
    layout, _ = membrane_layout(scn.degrees)
    return Streams("membrane", SensorLog(t_s, readings), MarkerLog(t_m, fixed_ids + ids, world_pos),
                   t_m, ctrl.reshape(len(t_m), -1), layout,
                   {"pressures": pressures[idx_m], "drift": drift[idx_m], "placement": placement})


# --------------------------------------------------------------------------- files

def write_truth(path, t_us, values):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["t_us"] + [f"v{i}" for i in range(values.shape[1])]) + "\n")
        for t, row in zip(t_us, values):
            fh.write(f"{int(t)}," + ",".join(repr(float(x)) for x in row) + "\n")


def read_truth(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1:]


def emit_logs(streams: Streams, out_dir, batch: str) -> dict:
    """Write ``<batch>_sensors.csv``, ``<batch>_markers.csv`` and ``<batch>_truth.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "sensors": os.path.join(out_dir, f"{batch}_sensors.csv"),
        "markers": os.path.join(out_dir, f"{batch}_markers.csv"),
        "truth": os.path.join(out_dir, f"{batch}_truth.csv"),
    }
    write_sensor_log(streams.sensors, paths["sensors"])
    write_marker_log(streams.markers, paths["markers"])
    write_truth(paths["truth"], streams.truth_t_us, streams.truth)
    return paths


def _scenario_kwargs(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    out = {}
    for k, v in d.items():
        out[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
    return out


@dataclass
class ScenarioFile:
    """Several capture batches of one robot sharing hardware and defaults."""

    kind: str
    batches: list  # (name, role, scenario)

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioFile":
        if d.get("format_version") != SCENARIO_FORMAT_VERSION:
            raise ValueError(f"unsupported scenario format_version {d.get('format_version')}")
        kind = d.get("kind")
        scn_cls = {"joint": JointScenario, "membrane": MembraneScenario}.get(kind)
        if scn_cls is None:
            raise ValueError(f"unknown scenario kind {kind!r}")
        defaults = dict(d.get("defaults", {}))
        batches = []
        if not d.get("batches"):
            raise ValueError("scenario lists no batches")
        for i, b in enumerate(d["batches"]):
            b = dict(b)
            name = b.pop("name")
            role = b.pop("role", None)
            kw = _scenario_kwargs(scn_cls, {**defaults, **b})
            kw.setdefault("seed", int(d.get("seed", 0)) * 1000 + i)
            batches.append((name, role, scn_cls(**kw)))
        return cls(kind, batches)

    @classmethod
    def load(cls, path) -> "ScenarioFile":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def generate(self):
        gen = gen_joint if self.kind == "joint" else gen_membrane
        for name, role, scn in self.batches:
            yield name, role, gen(scn)


def simulate_to_dir(scenario: ScenarioFile, out_dir) -> dict:
    """Generate every batch, write its logs and a ``layout.json`` carrying the split."""
    os.makedirs(out_dir, exist_ok=True)
    written, split, layout = {}, {}, None
    for name, role, streams in scenario.generate():
        written[name] = emit_logs(streams, out_dir, name)
        if role is not None:
            split[name] = role
        layout = streams.layout
    with open(os.path.join(out_dir, "layout.json"), "w", encoding="utf-8") as fh:
        json.dump(layout_to_json(layout, split), fh, indent=2)
    written["layout"] = os.path.join(out_dir, "layout.json")
    return written


def scenario_to_json(kind: str, batches, defaults=None, seed=0) -> dict:
    """Build a scenario document from ``(name, role, overrides)`` triples."""
    return {"format_version": SCENARIO_FORMAT_VERSION, "kind": kind, "seed": seed,
            "defaults": dict(defaults or {}),
            "batches": [{"name": n, "role": r, **o} for n, r, o in batches]}
