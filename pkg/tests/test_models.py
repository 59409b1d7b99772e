import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import gram_oracle, projected_gradient_qp
from softrecon.errors import (
    CorruptFile,
    DegenerateMatrix,
    DimMismatch,
    RankDeficient,
    SolverStalled,
    VersionMismatch,
)
from softrecon.geometry import is_rotation, rot_z
from softrecon.models import (
    ModelConfig,
    decode_joint,
    decode_membrane,
    fit_regressor,
    load_model,
    model_from_json,
    predict,
    save_model,
    train_mvlr,
    train_svr,
)
from softrecon.models.nets import NETS, ParamVector, mse_loss, mse_loss_grad
from softrecon.models.svr import kkt_violation, rbf_kernel, solve_svr_dual

GOLDEN = Path(__file__).with_name("data") / "golden_fnn.json"


class TestMVLR:
    def test_exact_recovery(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 12))
        w0, b0 = rng.normal(size=(12, 5)), rng.normal(size=5)
        m = train_mvlr(x, x @ w0 + b0)
        np.testing.assert_allclose(m.params["W"], w0, atol=1e-9)
        np.testing.assert_allclose(m.params["b"], b0, atol=1e-9)

    def test_constant_targets(self):
        x = np.random.default_rng(1).normal(size=(50, 4))
        m = train_mvlr(x, np.tile([3.0, -1.0], (50, 1)))
        np.testing.assert_allclose(m.params["W"], 0, atol=1e-12)
        np.testing.assert_allclose(m.params["b"], [3, -1], atol=1e-12)
        np.testing.assert_allclose(predict(m, np.zeros(4)), [3, -1], atol=1e-12)

    def test_gram_oracle(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(300, 20)), rng.normal(size=(300, 7))
        m = train_mvlr(x, y)
        w, b = gram_oracle(x, y)
        scale = np.linalg.norm(np.vstack([w, b]))
        assert np.linalg.norm(m.params["W"] - w) / scale <= 1e-8
        assert np.linalg.norm(m.params["b"] - b) / scale <= 1e-8

    def test_rank_deficient(self):
        x = np.random.default_rng(3).normal(size=(30, 3))
        with pytest.raises(RankDeficient):
            train_mvlr(np.column_stack([x, x[:, 0]]), x)
        with pytest.raises(RankDeficient):
            train_mvlr(x[:3], x[:3])

    def test_cannot_memorise_nonlinear(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=(32, 2))
        y = (x[:, 0] * x[:, 1])[:, None]
        m = train_mvlr(x, y)
        w, b = gram_oracle(x, y)
        floor = np.mean((x @ w + b - y) ** 2)
        mse = np.mean((predict(m, x) - y) ** 2)
        assert mse == pytest.approx(floor, rel=1e-9)
        assert floor > 1e-3


def net_config(kind, head, k=4, window=3, channels=2, hidden=5):
    return ModelConfig(kind, window * channels, k, hidden_size=hidden, output_head=head,
                       window_len=window, n_channels=channels)


class TestGradients:
    @pytest.mark.parametrize("kind", ["FNN", "LSTM"])
    @pytest.mark.parametrize("head", ["linear", "tanh"])
    def test_finite_differences(self, kind, head):
        cfg = net_config(kind, head)
        rng = np.random.default_rng(hash((kind, head)) % 2**32)
        init = NETS[kind][0]
        for trial in range(10):
            p = init(cfg, rng)
            p.vec += rng.normal(0, 0.3, p.size)
            x = rng.normal(size=(5, cfg.window_len, cfg.n_channels))
            if kind == "FNN":
                x = x.reshape(5, -1)
            t = rng.normal(size=(5, cfg.output_dim))
            _, g = mse_loss_grad(p, cfg, x, t)
            for k in rng.choice(p.size, 10, replace=False):
                q = p.copy()
                q.vec[k] += 1e-5
                up = mse_loss(q, cfg, x, t)
                q.vec[k] -= 2e-5
                down = mse_loss(q, cfg, x, t)
                fd = (up - down) / 2e-5
                denom = max(abs(fd), abs(g[k]), 1e-10)
                assert abs(fd - g[k]) / denom < 1e-4, (trial, k, fd, g[k])

    def test_joint_head_mixes(self):
        cfg = ModelConfig("FNN", 120, 12, hidden_size=4, output_head="joint")
        p = NETS["FNN"][0](cfg, np.random.default_rng(0))
        p["W2"][:] *= 50
        y, _ = NETS["FNN"][1](p, np.random.default_rng(1).normal(size=(3, 120)), cfg.tanh_dims)
        assert np.all(np.abs(y[:, :9]) <= 1.0)
        assert np.any(np.abs(y[:, 9:]) > 1.0)


def memorise(kind, head):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(32, 6))
    y = rng.uniform(-0.8, 0.8, size=(32, 2))
    cfg = ModelConfig(kind, 6, 2, hidden_size=50, output_head=head, window_len=3, n_channels=2,
                      learning_rate=1e-2, batch_size=32, max_epochs=5000, patience=5000, seed=1)
    m = fit_regressor(cfg, (x, y), (x, y))
    return float(np.mean((predict(m, x) - y) ** 2))


class TestTraining:
    @pytest.mark.parametrize("kind,head", [("FNN", "linear"), ("FNN", "tanh"), ("LSTM", "linear")])
    def test_memorisation(self, kind, head):
        assert memorise(kind, head) < 1e-4

    def test_bias_learns_constant(self):
        x = np.zeros((64, 6))
        y = np.tile([2.0, -0.5], (64, 1))
        cfg = ModelConfig("FNN", 6, 2, hidden_size=3, window_len=3, n_channels=2, max_epochs=500,
                          patience=500, learning_rate=1e-2)
        m = fit_regressor(cfg, (x, y), (x, y))
        np.testing.assert_allclose(predict(m, np.zeros(6)), [2.0, -0.5], atol=1e-4)

    def test_seeded_determinism(self):
        rng = np.random.default_rng(8)
        x, y = rng.normal(size=(100, 6)), rng.normal(size=(100, 2))
        cfg = ModelConfig("LSTM", 6, 2, hidden_size=4, window_len=3, n_channels=2, max_epochs=5)
        a = fit_regressor(cfg, (x, y), (x[:20], y[:20]))
        b = fit_regressor(cfg, (x, y), (x[:20], y[:20]))
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_best_epoch_is_kept(self):
        rng = np.random.default_rng(9)
        x, y = rng.normal(size=(64, 6)), rng.normal(size=(64, 2))
        xv, yv = rng.normal(size=(16, 6)), rng.normal(size=(16, 2))
        cfg = ModelConfig("FNN", 6, 2, hidden_size=30, window_len=3, n_channels=2, max_epochs=300,
                          patience=10, learning_rate=1e-2)
        m = fit_regressor(cfg, (x, y), (xv, yv))
        assert m.report.stop_reason == "early_stop"
        val = np.mean((m.scaler.encode(predict(m, xv)) - m.scaler.encode(yv)) ** 2)
        assert val == pytest.approx(min(m.report.val_loss), rel=1e-9)

    def test_lstm_lag_task(self):
        rng = np.random.default_rng(10)

        def make(n):
            x = rng.uniform(-1, 1, size=(n, 10, 1))
            return x, x[:, 6, :]  # value three steps before the last

        (xt, yt), (xv, yv) = make(2000), make(400)
        last_t = np.column_stack([xt[:, -1, 0], np.ones(len(xt))])
        coef = np.linalg.lstsq(last_t, yt, rcond=None)[0]
        base = np.mean((np.column_stack([xv[:, -1, 0], np.ones(len(xv))]) @ coef - yv) ** 2)
        cfg = ModelConfig("LSTM", 10, 1, hidden_size=20, window_len=10, n_channels=1, max_epochs=60,
                          learning_rate=1e-2, seed=3)
        m = fit_regressor(cfg, (xt, yt), (xv, yv))
        mse = np.mean((predict(m, xv) - yv) ** 2)
        assert mse < 0.25 * base

    def test_lstm_constant_sequence_permutation(self):
        cfg = ModelConfig("LSTM", 12, 2, hidden_size=4, window_len=4, n_channels=3, max_epochs=2)
        rng = np.random.default_rng(11)
        m = fit_regressor(cfg, (rng.normal(size=(16, 12)), rng.normal(size=(16, 2))),
                          (rng.normal(size=(4, 12)), rng.normal(size=(4, 2))))
        frame = rng.normal(size=3)
        seq = np.tile(frame, (4, 1))
        out = predict(m, seq)
        assert np.array_equal(out, predict(m, seq[[2, 0, 3, 1]]))


class TestSVR:
    def test_epsilon_tube(self):
        x = np.linspace(0, 1, 40)[:, None]
        cfg = ModelConfig("SVR", 1, 1, window_len=1, n_channels=1, svr_c=1000.0, svr_epsilon=0.01,
                          svr_gamma=10.0)
        m = train_svr(x, x, cfg)
        assert np.max(np.abs(predict(m, x) - x)) <= 0.01 * m.scaler.scale[0] + 1e-2

    def test_constant_targets(self):
        x = np.random.default_rng(0).normal(size=(30, 3))
        cfg = ModelConfig("SVR", 3, 1, window_len=1, n_channels=3)
        m = train_svr(x, np.full((30, 1), 4.2), cfg)
        assert m.params["coef"].size == 0
        np.testing.assert_allclose(predict(m, np.random.default_rng(1).normal(size=(5, 3))), 4.2,
                                   atol=1e-12)

    def test_kkt_and_box(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(60, 4))
        y = np.sin(x[:, 0]) + 0.1 * rng.normal(size=60)
        k = rbf_kernel(x, x, 0.25)
        sol = solve_svr_dual(k, y, 1.0, 0.05)
        assert np.all(np.abs(sol.coef) <= 1.0 + 1e-12)
        assert abs(sol.coef.sum()) <= 1e-10
        assert kkt_violation(k, y, 1.0, 0.05, sol.coef, sol.bias) <= 1e-3

    @pytest.mark.parametrize("seed", range(3))
    def test_qp_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(20, 3))
        y = np.cos(x[:, 0]) + x[:, 1]
        c, eps = 1.0, 0.05
        k = rbf_kernel(x, x, 0.5)
        sol = solve_svr_dual(k, y, c, eps)
        assert abs(sol.objective - projected_gradient_qp(k, y, c, eps)) <= 1e-4

    def test_duplicate_non_support_point(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, size=(50, 2))
        y = np.sin(x[:, 0]) * np.cos(x[:, 1])
        cfg = ModelConfig("SVR", 2, 1, window_len=1, n_channels=2, svr_epsilon=0.1, svr_gamma=0.5)
        m = train_svr(x, y[:, None], cfg)
        k = rbf_kernel(x, x, 0.5)
        ys = m.scaler.encode(y[:, None])[:, 0]
        sol = solve_svr_dual(k, ys, 1.0, 0.1)
        inside = np.nonzero(sol.coef == 0)[0]
        assert len(inside) > 0
        j = inside[0]
        x2 = np.vstack([x, x[j]])
        k2 = rbf_kernel(x2, x2, 0.5)
        sol2 = solve_svr_dual(k2, np.r_[ys, ys[j]], 1.0, 0.1)
        probe = rng.uniform(-2, 2, size=(30, 2))
        f1 = rbf_kernel(probe, x, 0.5) @ sol.coef + sol.bias
        f2 = rbf_kernel(probe, x2, 0.5) @ sol2.coef + sol2.bias
        np.testing.assert_allclose(f1, f2, atol=1e-12)

    def test_stalled(self):
        x = np.random.default_rng(5).normal(size=(40, 2))
        k = rbf_kernel(x, x, 1.0)
        with pytest.raises(SolverStalled):
            solve_svr_dual(k, np.sin(x[:, 0]), 1.0, 0.01, max_iter=3)


class TestPredictAndDecode:
    def setup_method(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(80, 6)), rng.normal(size=(80, 12))
        self.cfg = ModelConfig("FNN", 6, 12, hidden_size=5, output_head="joint", window_len=3,
                               n_channels=2, max_epochs=3)
        self.model = fit_regressor(self.cfg, (x, y), (x, y))
        self.x = x

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            predict(self.model, np.zeros(5))
        with pytest.raises(DimMismatch):
            predict(self.model, np.zeros((3, 4, 2)))

    def test_batch_equals_single(self):
        batch = predict(self.model, self.x[:7])
        singles = np.array([predict(self.model, r) for r in self.x[:7]])
        np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-14)
        np.testing.assert_array_equal(predict(self.model, self.x[0].reshape(3, 2)), singles[0])

    def test_decode_identity(self):
        t = decode_joint(np.r_[np.eye(3).ravel(), 0, 0, 0])
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_array_equal(t.translation, 0)

    def test_decode_scaled(self):
        t = decode_joint(np.r_[0.9 * rot_z(30).ravel(), 1, 2, 3])
        np.testing.assert_allclose(t.rotation, rot_z(30), atol=1e-12)
        np.testing.assert_array_equal(t.translation, [1, 2, 3])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=12, max_size=12))
    def test_decode_proper(self, raw):
        raw = np.array(raw)
        if np.linalg.svd(raw[:9].reshape(3, 3), compute_uv=False)[-1] < 1e-6:
            return
        r = decode_joint(raw).rotation
        assert is_rotation(r, 1e-9)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)

    def test_decode_degenerate(self):
        with pytest.raises(DegenerateMatrix):
            decode_joint(np.zeros(12))
        with pytest.raises(DimMismatch):
            decode_joint(np.zeros(11))

    def test_decode_membrane(self):
        s = decode_membrane(np.zeros(75), (4, 4))
        assert s.control_points.shape == (5, 5, 3) and not s.control_points.any()
        v = np.random.default_rng(1).normal(size=75)
        np.testing.assert_array_equal(decode_membrane(v, (4, 4)).to_vector(), v)
        with pytest.raises(DimMismatch):
            decode_membrane(np.zeros(74), (4, 4))


class TestModelFiles:
    @pytest.mark.parametrize("kind", ["MVLR", "FNN", "LSTM", "SVR"])
    def test_round_trip(self, kind, tmp_path):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(60, 6)), rng.normal(size=(60, 3))
        cfg = ModelConfig(kind, 6, 3, hidden_size=4, window_len=3, n_channels=2, max_epochs=3)
        m = fit_regressor(cfg, (x, y), (x, y))
        save_model(m, tmp_path / "m.json")
        again = load_model(tmp_path / "m.json")
        for k in m.params:
            assert np.array_equal(m.params[k], again.params[k])
        assert np.array_equal(predict(m, x), predict(again, x))

    def test_corrupt_and_version(self, tmp_path):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(40, 6)), rng.normal(size=(40, 2))
        m = fit_regressor(ModelConfig("MVLR", 6, 2, window_len=3, n_channels=2), (x, y))
        save_model(m, tmp_path / "m.json")
        text = (tmp_path / "m.json").read_text()
        (tmp_path / "cut.json").write_text(text[: len(text) // 2])
        with pytest.raises(CorruptFile):
            load_model(tmp_path / "cut.json")
        d = json.loads(text)
        d["format_version"] = 2
        with pytest.raises(VersionMismatch):
            model_from_json(d)
        d = json.loads(text)
        d["checksum"] = "0" * 64
        with pytest.raises(CorruptFile):
            model_from_json(d)

    def test_golden_weights(self):
        doc = json.loads(GOLDEN.read_text())
        m = model_from_json(doc["model"])
        expected = np.array([[float(v) for v in row] for row in doc["output"]])
        np.testing.assert_allclose(predict(m, np.array(doc["input"])), expected, rtol=0, atol=1e-10)


def test_param_vector_views():
    p = ParamVector({"a": (2, 3), "b": (4,)})
    p["a"][:] = 1.0
    assert p.vec[:6].sum() == 6 and p.vec[6:].sum() == 0
