import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softrecon.bezier import design_matrix
from softrecon.dataset import Dataset, SplitSpec, build_dataset, split
from softrecon.errors import DimMismatch, MissingMarker
from softrecon.evaluation import (
    AblationSpec,
    Histogram,
    ablation,
    compare_models,
    default_config,
    dump_raw,
    eval_joint,
    eval_membrane,
    fit_floor,
    joint_errors,
    latency_benchmark,
    membrane_distances,
    membrane_ldr_ablation,
    resolution_study,
    stats_from_dump,
    train_model,
)
from softrecon.geometry import rot_x, rot_y, rot_z
from softrecon.models import LabelScaler, ModelConfig, Regressor, fit_regressor
from softrecon.simulator import MembraneScenario, gen_membrane


def constant_model(out, window=2, channels=3):
    out = np.asarray(out, dtype=float)
    cfg = ModelConfig("MVLR", window * channels, len(out), window_len=window, n_channels=channels)
    return Regressor(cfg, {"W": np.zeros((window * channels, len(out))), "b": out.copy()},
                     LabelScaler.identity(len(out)))


def joint_dataset(labels, window=2, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    n = len(labels)
    return Dataset("joint", rng.uniform(size=(n, window, channels)), np.asarray(labels, dtype=float),
                   np.full(n, "b", dtype=object), np.arange(n, dtype=np.int64) * 10_000)


def pose(yaw, pitch, roll, t=(1.0, -2.0, 80.0)):
    r = rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)
    return np.r_[r.ravel(), t]


def scripted_metrics(pred, truth):
    """Independent recomputation: SVD projection and closed-form z-y'-x'' angles."""
    def angles(r):
        return np.degrees([math.atan2(r[1, 0], r[0, 0]), -math.asin(np.clip(r[2, 0], -1, 1)),
                           math.atan2(r[2, 1], r[2, 2])])

    out = []
    for p, t in zip(pred, truth):
        u, _, vt = np.linalg.svd(p[:9].reshape(3, 3))
        r = u @ np.diag([1, 1, np.linalg.det(u @ vt)]) @ vt
        d = angles(r) - angles(t[:9].reshape(3, 3))
        d = np.abs((d + 180) % 360 - 180)
        out.append(np.r_[d, np.linalg.norm(p[9:] - t[9:])])
    return np.array(out)


class TestJoint:
    def test_perfect_predictor(self):
        target = pose(20, -10, 5)
        rep = eval_joint(constant_model(target), joint_dataset([target] * 5))
        for k in ("yaw", "pitch", "roll", "translation"):
            assert rep.stats[k].mean == pytest.approx(0, abs=1e-9)
            assert rep.stats[k].max == pytest.approx(0, abs=1e-9)

    def test_fixed_yaw_offset(self):
        truth = pose(20, -10, 5)
        pred = np.r_[(rot_z(1) @ truth[:9].reshape(3, 3)).ravel(), truth[9:]]
        rep = eval_joint(constant_model(pred), joint_dataset([truth] * 4))
        assert rep.mean("yaw") == pytest.approx(1.0, abs=1e-9)
        for k in ("pitch", "roll", "translation"):
            assert rep.mean(k) == pytest.approx(0, abs=1e-9)

    def test_scripted_recomputation(self):
        rng = np.random.default_rng(3)
        truth = np.array([pose(*rng.uniform(-40, 40, 3), rng.normal(0, 5, 3)) for _ in range(50)])
        pred = truth + rng.normal(0, 0.05, truth.shape)
        raw = joint_errors(pred, truth)
        got = np.column_stack([raw[k] for k in ("yaw", "pitch", "roll", "translation")])
        np.testing.assert_allclose(got, scripted_metrics(pred, truth), atol=1e-9)

    def test_truth_override_and_dims(self):
        a, b = pose(0, 0, 0), pose(5, 0, 0)
        ds = joint_dataset([a] * 3)
        rep = eval_joint(constant_model(a), ds, truth=np.array([b] * 3))
        assert rep.mean("yaw") == pytest.approx(5.0, abs=1e-9)
        with pytest.raises(DimMismatch):
            eval_joint(constant_model(np.zeros(11)), ds)
        with pytest.raises(DimMismatch):
            joint_errors(np.zeros((3, 12)), np.zeros((2, 12)))

    def test_pure_and_histogram_total(self):
        rng = np.random.default_rng(4)
        labels = [pose(*rng.uniform(-20, 20, 3)) for _ in range(40)]
        model = constant_model(pose(0, 0, 0))
        ds = joint_dataset(labels)
        r1, r2 = eval_joint(model, ds), eval_joint(model, ds)
        assert r1.to_json() == r2.to_json()
        for h in r1.histograms.values():
            assert h.counts.sum() == 40


@pytest.fixture(scope="module")
def membrane_parts():
    parts = []
    for name, seed, dur in (("tr", 21, 12.0), ("va", 22, 3.0), ("te", 23, 3.0)):
        s = gen_membrane(MembraneScenario(duration_s=dur, seed=seed))
        ds, _ = build_dataset(s.sensors, s.markers, s.layout, name)
        parts.append(ds)
    layout = s.layout
    data = split(Dataset.concat(parts), SplitSpec({"tr": "train", "va": "validation", "te": "test"}))
    return data, layout.uv_table


class TestMembrane:
    def test_label_prediction_equals_fit_residual(self, membrane_parts):
        data, table = membrane_parts
        test = data["test"].take(slice(0, 5))
        for i in range(5):
            rep = eval_membrane(constant_model(test.labels[i], 10, 12), test.take([i]), table)
            uv = table.lookup(test.marker_ids)
            oracle = membrane_distances(test.labels[i:i + 1], test.markers[i:i + 1], uv, (4, 4))
            assert rep.mean("distance") == pytest.approx(oracle.mean(), abs=1e-12)
        assert fit_floor(test, table) > 0.1  # marker noise keeps the floor above zero

    def test_translated_surface(self, membrane_parts):
        data, table = membrane_parts
        test = data["test"].take(slice(0, 3))
        uv = table.lookup(test.marker_ids)
        ctrl = test.labels[0].reshape(-1, 3)
        exact = test.take([0, 0, 0])
        surf = design_matrix(uv, 4, 4) @ ctrl
        exact.markers = np.broadcast_to(surf, (3,) + surf.shape).copy()
        lifted = (ctrl + [0, 0, 2.0]).reshape(-1)
        rep = eval_membrane(constant_model(lifted, 10, 12), exact, table)
        assert rep.mean("distance") == pytest.approx(2.0, abs=1e-9)
        assert rep.histograms["distance"].counts.sum() == 3 * len(test.marker_ids)

    def test_missing_markers(self, membrane_parts):
        data, table = membrane_parts
        test = data["test"].take(slice(0, 2))
        model = constant_model(test.labels[0], 10, 12)
        bare = test.take(slice(None))
        bare.markers = None
        with pytest.raises(MissingMarker):
            eval_membrane(model, bare, table)
        renamed = test.take(slice(None))
        renamed.marker_ids = ("nope",) + tuple(test.marker_ids[1:])
        with pytest.raises(MissingMarker):
            eval_membrane(model, renamed, table)

    def test_raw_dump_recomputes(self, membrane_parts, tmp_path):
        data, table = membrane_parts
        model = train_model(default_config("MVLR", data["train"]), data["train"])
        rep = eval_membrane(model, data["test"], table)
        dump_raw(rep, tmp_path / "raw.csv")
        again = stats_from_dump(tmp_path / "raw.csv")["distance"]
        for f in ("mean", "std", "max"):
            assert abs(getattr(again, f) - getattr(rep.stats["distance"], f)) <= 1e-12

    def test_resolution_nesting(self, membrane_parts):
        data, table = membrane_parts
        cfg = default_config("MVLR", data["train"])
        t1 = resolution_study(data, table, [(3, 3), (4, 4), (5, 5)], cfg)
        rms = t1.column("fit_rms")
        assert rms[0] >= rms[1] >= rms[2]
        assert t1.column("grid") == ["4x4", "5x5", "6x6"]
        assert t1.to_csv() == resolution_study(data, table, [(3, 3), (4, 4), (5, 5)], cfg).to_csv()

    def test_ablation_trend(self, membrane_parts):
        data, table = membrane_parts
        cfg = default_config("MVLR", data["train"])
        t, _ = ablation(cfg, data, membrane_ldr_ablation(), table)
        means = t.column("distance_mean")
        assert means[0] >= means[2]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=300))
def test_histogram_properties(values):
    v = np.array(values)
    h = Histogram.of(v)
    assert h.counts.sum() == len(v)
    assert len(h.edges) == len(h.counts) + 1 == 32
    assert h.edges[0] <= v.min() and h.edges[-1] >= v.max()
    assert np.all(np.diff(h.edges) >= 0)


def synthetic_joint(n, seed):
    """Pose angles drive 12 readings through an inverse-square law."""
    rng = np.random.default_rng(seed)
    ang = rng.uniform(-30, 30, size=(n, 2))
    phase = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    a, b = np.radians(ang[:, :1]), np.radians(ang[:, 1:])
    dist = 2.0 + np.cos(phase) * np.sin(a) + np.sin(phase) * np.sin(b)
    readings = (1.0 / dist) ** 2 + rng.normal(0, 1e-3, (n, 12))
    labels = np.array([pose(y, p, 0, (0, 0, 80 + p / 6)) for y, p in ang])
    return Dataset("joint", readings[:, None, :], labels, np.full(n, str(seed), dtype=object),
                   np.arange(n, dtype=np.int64))


@pytest.fixture(scope="module")
def parts():
    return {"train": synthetic_joint(3000, 1), "validation": synthetic_joint(500, 2),
            "test": synthetic_joint(500, 3)}


class TestComparison:
    def test_four_rows_and_nonlinear_margin(self, parts):
        ds = parts["train"]
        configs = [default_config("MVLR", ds), default_config("FNN", ds, max_epochs=150, patience=150),
                   default_config("LSTM", ds, max_epochs=5, hidden_size=8),
                   default_config("SVR", ds, svr_max_train=400)]
        table, reports = compare_models(configs, parts)
        assert len(table.rows) == 4 and table.column("model") == ["MVLR", "FNN", "LSTM", "SVR"]
        # The linear-fit residual bounds MVLR from below; the FNN has to beat it.
        assert reports[0].mean("yaw") >= reports[1].mean("yaw")
        again, _ = compare_models(configs, parts)
        assert again.to_csv() == table.to_csv()

    def test_ablation_full_row_matches_compare(self, parts):
        cfg = default_config("MVLR", parts["train"])
        cmp_table, _ = compare_models([cfg], parts)
        abl, _ = ablation(cfg, parts, AblationSpec({"all": tuple(range(12)), "half": (0, 2, 4, 6)}))
        assert abl.rows[0][3:] == cmp_table.rows[0][3:]
        assert abl.column("n_channels") == [12, 4]

    def test_bad_ablation_specs(self):
        with pytest.raises(ValueError):
            AblationSpec({"none": ()})
        with pytest.raises(ValueError):
            AblationSpec({"bad": (0, 12)})
        with pytest.raises(ValueError):
            AblationSpec({})


class TestLatency:
    def test_rate_definition_and_hardware(self):
        model = constant_model(pose(0, 0, 0), 10, 12)
        rep = latency_benchmark(model, 200)
        assert rep.rate_hz == pytest.approx(1.0 / rep.mean_s, rel=0.1)
        assert rep.p50_s <= rep.p95_s <= rep.p99_s <= rep.max_s
        assert "cpus=" in rep.hardware and rep.n == 200

    def test_fnn_faster_than_lstm(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(64, 120)), rng.normal(size=(64, 12))
        fnn = fit_regressor(ModelConfig("FNN", 120, 12, output_head="joint", max_epochs=1), (x, y), (x, y))
        lstm = fit_regressor(ModelConfig("LSTM", 120, 12, output_head="joint", max_epochs=1), (x, y), (x, y))
        f, l = latency_benchmark(fnn, 300), latency_benchmark(lstm, 300)
        assert f.p50_s < l.p50_s
        assert l.mean_s < 4e-3
