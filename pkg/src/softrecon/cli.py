"""``softrecon`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure (also used when ``prepare`` drops more than half the frames).
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import os
import queue
import sys
import threading
import time
from collections import deque
from datetime import datetime, timezone

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bezier import MarkerParamTable, sample_grid
from .dataset import (
    Dataset,
    SplitSpec,
    build_dataset,
    fit_normalizer,
    layout_from_json,
    layout_to_json,
    load_marker_log,
    load_sensor_log,
    read_archive,
    split,
    validate_split_roles,
    write_archive,
)
from .errors import (
    CorruptFile,
    DegenerateMatrix,
    DimMismatch,
    NonFiniteLoss,
    ParseError,
    RankDeficient,
    SolverStalled,
    UnknownBatch,
    VersionMismatch,
)
from .evaluation import (
    AblationSpec,
    ablation,
    compare_models,
    decode_output,
    dump_raw,
    evaluate,
    fit_config,
    joint_ldr_ablation,
    membrane_ldr_ablation,
    report_table,
    resolution_study,
    train_model,
)
from .models import ModelConfig, load_model, save_model
from .simulator import ScenarioFile, simulate_to_dir

log = logging.getLogger("softrecon")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
TICK_US = 10_000
TICK_BUDGET_S = 0.020
QUEUE_SIZE = 256
MAX_DROP_FRACTION = 0.5


class ConfigError(Exception):
    pass


class NumericFailure(Exception):
    pass


# --------------------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_json(path) -> dict:
    """Parse a JSON config; syntax errors become ConfigError with line and column."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _digest(paths, base=None) -> dict:
    """sha256 per file, keyed relative to ``base`` when given."""
    return {(os.path.relpath(p, base) if base else p): sha256_file(p)
            for p in sorted(set(paths)) if os.path.isfile(p)}


def write_manifest(out_dir, command: str, argv, config_paths, inputs, outputs, seeds: dict,
                   started: str, extra: dict | None = None) -> str:
    """One ``manifest.json`` per run; output digests exclude the manifest itself."""
    cfg_h = hashlib.sha256()
    for p in config_paths:
        with open(p, "rb") as fh:
            cfg_h.update(fh.read())
    outputs = [p for p in outputs if os.path.basename(p) != "manifest.json"]
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_digest": cfg_h.hexdigest(),
        "seeds": seeds,
        "inputs": _digest(inputs),
        "outputs": _digest(outputs, out_dir),
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest["extra"] = extra
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, manifest)
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _files_in(d) -> list:
    return sorted(p for p in glob.glob(os.path.join(d, "*"))
                  if os.path.isfile(p) and os.path.basename(p) != "manifest.json")


def _model_config(path, ds: Dataset, seed, overrides) -> ModelConfig:
    d = read_json(path)
    if "model" in d and isinstance(d["model"], dict):
        d = d["model"]
    return _config_from_dict(d, ds, seed, overrides)


def _config_from_dict(d: dict, ds: Dataset, seed=None, overrides=None) -> ModelConfig:
    d = dict(d)
    d.update(overrides or {})
    if seed is not None:
        d["seed"] = seed
    kind = str(d.get("kind", "")).upper()
    w, c = ds.inputs.shape[1], ds.inputs.shape[2]
    d.setdefault("window_len", w)
    d.setdefault("n_channels", c)
    d.setdefault("input_dim", w * c)
    d.setdefault("output_dim", ds.labels.shape[1])
    if ds.kind == "joint" and kind in ("FNN", "LSTM"):
        d.setdefault("output_head", "joint")
    try:
        return fit_config(ModelConfig.from_json(d), ds)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model config: {exc}") from None


def _uv_table(data_dir):
    path = os.path.join(data_dir, "uv_table.json")
    return MarkerParamTable.load(path) if os.path.exists(path) else None


# --------------------------------------------------------------------------- commands

def cmd_simulate(args) -> dict:
    d = read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        scenario = ScenarioFile.from_json(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"scenario: {exc}") from None
    written = simulate_to_dir(scenario, args.out)
    outputs = [p for v in written.values() for p in (v.values() if isinstance(v, dict) else [v])]
    return {"config": [args.config], "inputs": [], "outputs": outputs,
            "seeds": {"scenario": d.get("seed", 0)}}


def _discover_batches(logs_dir) -> list:
    names = []
    for p in sorted(glob.glob(os.path.join(logs_dir, "*_sensors.csv"))):
        name = os.path.basename(p)[: -len("_sensors.csv")]
        if os.path.exists(os.path.join(logs_dir, f"{name}_markers.csv")):
            names.append(name)
    if not names:
        raise FileNotFoundError(f"no <batch>_sensors.csv / <batch>_markers.csv pairs in {logs_dir}")
    return names


def cmd_prepare(args) -> dict:
    layout_path = args.layout or os.path.join(args.logs, "layout.json")
    layout_doc = read_json(layout_path)
    try:
        layout = layout_from_json(layout_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"layout: {exc}") from None
    roles = read_json(args.config) if args.config else layout_doc.get("split", {})
    try:
        spec = SplitSpec.from_json(roles)
        validate_split_roles(spec)
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None
    batches = [b for b in _discover_batches(args.logs) if b in spec.roles]
    missing = sorted(set(spec.roles) - set(batches))
    if missing:
        raise FileNotFoundError(f"split names batches without logs: {missing}")
    parts, report, inputs = [], {}, [layout_path]
    for b in batches:
        sp, mp = (os.path.join(args.logs, f"{b}_{s}.csv") for s in ("sensors", "markers"))
        inputs += [sp, mp]
        ds, drops = build_dataset(load_sensor_log(sp, layout.n_sensors), load_marker_log(mp), layout, b)
        report[b] = drops
        parts.append(ds)
    data = split(Dataset.concat(parts), spec)
    if len(data["train"]) == 0:
        raise NumericFailure("no usable training samples")
    stats = fit_normalizer(data["train"])
    total = sum(r["total"] for r in report.values())
    kept = sum(r["kept"] for r in report.values())
    meta = {"kind": layout.kind, "window_len": layout.window_len,
            "channels": list(range(layout.n_sensors)), "batches": spec.roles,
            "counts": {r: len(d) for r, d in data.items()},
            "degrees": list(layout.degrees) if layout.kind == "membrane" else None,
            "marker_ids": list(layout.uv_table.ids) if layout.kind == "membrane" else []}
    write_archive(args.out, data, stats, meta)
    drop_report = {"batches": report, "total": total, "kept": kept,
                   "dropped_fraction": 1.0 - kept / total if total else 1.0}
    write_json(os.path.join(args.out, "drop_report.json"), drop_report)
    write_json(os.path.join(args.out, "layout.json"), layout_to_json(layout, spec.roles))
    if layout.kind == "membrane":
        layout.uv_table.save(os.path.join(args.out, "uv_table.json"))
    for b, r in report.items():
        causes = ", ".join(f"{k}={v}" for k, v in r.items() if k not in ("kept", "total") and v)
        print(f"{b}: kept {r['kept']}/{r['total']}" + (f" (dropped: {causes})" if causes else ""))
    result = {"config": [layout_path] + ([args.config] if args.config else []), "inputs": inputs,
              "outputs": _files_in(args.out), "seeds": {}}
    if drop_report["dropped_fraction"] > MAX_DROP_FRACTION:
        result["failure"] = (f"{drop_report['dropped_fraction']:.1%} of marker frames dropped; "
                             "see drop_report.json")
    return result


def cmd_train(args) -> dict:
    parts, _, _ = read_archive(args.data)
    cfg = _model_config(args.config, parts["train"], args.seed, parse_overrides(args.set))
    model = train_model(cfg, parts["train"], parts.get("validation"))
    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.json")
    save_model(model, model_path)
    outputs = [model_path]
    summary = {"kind": cfg.kind, "report": model.report.to_json()}
    if "validation" in parts and len(parts["validation"]):
        rep = evaluate(model, parts["validation"], _uv_table(args.data), model_id=cfg.kind,
                       dataset_id="validation")
        summary["validation"] = rep.to_json()
        print("validation: " + ", ".join(f"{k} mean {s.mean:.4f}" for k, s in rep.stats.items()))
    report_path = os.path.join(args.out, "train_report.json")
    write_json(report_path, summary)
    outputs.append(report_path)
    return {"config": [args.config], "inputs": _files_in(args.data), "outputs": outputs,
            "seeds": {"model": cfg.seed}}


def cmd_eval(args) -> dict:
    parts, _, _ = read_archive(args.data)
    uv = _uv_table(args.data)
    os.makedirs(args.out, exist_ok=True)
    outputs, inputs, configs = [], _files_in(args.data), []
    if args.model:
        reports = []
        for path in args.model:
            inputs.append(path)
            name = os.path.splitext(os.path.basename(path))[0]
            reports.append(evaluate(load_model(path), parts["test"], uv, model_id=name))
        table = report_table(reports)
    elif args.config:
        d = read_json(args.config)
        configs = [args.config]
        entries = d.get("models") if isinstance(d, dict) else d
        if not entries:
            raise ConfigError("comparison config lists no models")
        entries = [dict(e) for e in entries]
        names = [e.pop("name", None) for e in entries]
        cfgs = [_config_from_dict(e, parts["train"], args.seed) for e in entries]
        names = [n or c.kind for n, c in zip(names, cfgs)]
        table, reports = compare_models(cfgs, parts, uv, names=names)
    else:
        raise ConfigError("eval needs --model files or a --config comparison file")
    for rep in reports:
        outputs += _write_report(args.out, rep.model_id, rep)
    path = os.path.join(args.out, "comparison.csv")
    table.write(path)
    print(table.to_csv(), end="")
    return {"config": configs, "inputs": inputs, "outputs": outputs + [path],
            "seeds": {"model": args.seed} if args.seed is not None else {}}


def _write_report(out_dir, name, rep) -> list:
    raw = os.path.join(out_dir, f"{name}_errors.csv")
    dump_raw(rep, raw)
    rep.raw_path = os.path.basename(raw)  # relative, so reports do not depend on the output location
    summary = os.path.join(out_dir, f"{name}_report.json")
    write_json(summary, rep.to_json())
    return [raw, summary]


def cmd_ablate(args) -> dict:
    parts, _, _ = read_archive(args.data)
    d = read_json(args.config)
    preset = d.get("preset")
    try:
        if preset == "membrane_ldr":
            spec = membrane_ldr_ablation()
        elif preset == "joint_ldr":
            spec = joint_ldr_ablation()
        elif preset is None:
            spec = AblationSpec(dict(d.get("subsets", {})), parts["train"].inputs.shape[2])
        else:
            raise ValueError(f"unknown ablation preset {preset!r}")
    except ValueError as exc:
        raise ConfigError(f"ablation: {exc}") from None
    cfg = _config_from_dict(d.get("model", {"kind": "FNN"}), parts["train"], args.seed)
    table, reports = ablation(cfg, parts, spec, _uv_table(args.data))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.csv")
    table.write(path)
    outputs = [path]
    for rep in reports:
        outputs += _write_report(args.out, rep.model_id, rep)
    print(table.to_csv(), end="")
    return {"config": [args.config], "inputs": _files_in(args.data), "outputs": outputs,
            "seeds": {"model": cfg.seed}}


def cmd_resolution(args) -> dict:
    parts, _, meta = read_archive(args.data)
    if meta["kind"] != "membrane":
        raise ConfigError("resolution study needs a membrane dataset")
    d = read_json(args.config)
    degrees = d.get("degrees", [[3, 3], [4, 4], [5, 5]])
    cfg = _config_from_dict(d.get("model", {"kind": "FNN"}), parts["train"], args.seed)
    try:
        table = resolution_study(parts, _uv_table(args.data), degrees, cfg)
    except ValueError as exc:
        raise ConfigError(f"resolution: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "resolution.csv")
    table.write(path)
    print(table.to_csv(), end="")
    return {"config": [args.config], "inputs": _files_in(args.data), "outputs": [path],
            "seeds": {"model": cfg.seed}}


# --------------------------------------------------------------------------- replay

def _reader(path, n_channels, q: queue.Queue):
    """Parse sensor frames into ``q``; ends with None, or the exception that stopped it."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[0] != "t_us" or len(header) != n_channels + 1:
                raise ParseError(f"bad sensor log header {header!r}", line=1)
            last = None
            for lineno, row in enumerate(reader, start=2):
                if len(row) != n_channels + 1:
                    raise ParseError(f"expected {n_channels + 1} fields, got {len(row)}", line=lineno)
                try:
                    t = int(row[0])
                    r = np.array([float(x) for x in row[1:]])
                except ValueError as exc:
                    raise ParseError(str(exc), line=lineno) from None
                if last is not None and t < last:
                    raise ParseError("timestamp decreases", line=lineno)
                last = t
                q.put((t, r))
        q.put(None)
    except BaseException as exc:  # forwarded to the consumer
        q.put(exc)


def replay_stream(model, sensor_path, realtime: bool = False, emit=None) -> dict:
    """Predict once per 10 ms tick from the last ``window_len`` sensor frames at or before the tick.

    Frames are read on a separate thread into a bounded queue. ``emit``
    receives ``(tick_us, values)`` in tick order. In realtime mode output
    is paced to the log's own clock.
    """
    cfg = model.config
    q: queue.Queue = queue.Queue(maxsize=QUEUE_SIZE)
    th = threading.Thread(target=_reader, args=(sensor_path, cfg.n_channels, q), daemon=True)
    th.start()
    buf_t: deque = deque(maxlen=cfg.window_len)
    buf_r: deque = deque(maxlen=cfg.window_len)
    stats = {"ticks": 0, "predictions": 0, "underruns": 0, "max_latency_s": 0.0}
    state = {"t0": None, "next": None, "wall0": None}

    def fire(tick):
        if len(buf_r) < cfg.window_len:
            return
        if realtime:
            due = state["wall0"] + (tick - state["t0"]) / 1e6
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        t0 = time.perf_counter()
        out = model.predict_readings(np.array(buf_r))
        decoded = decode_output(out)
        values = (np.concatenate([decoded.rotation.reshape(-1), decoded.translation])
                  if cfg.output_dim == 12 else decoded.to_vector())
        lat = time.perf_counter() - t0
        stats["max_latency_s"] = max(stats["max_latency_s"], lat)
        if lat > TICK_BUDGET_S:
            stats["underruns"] += 1
            log.warning("tick %d us: prediction took %.1f ms (budget %.0f ms)", tick, lat * 1e3,
                        TICK_BUDGET_S * 1e3)
        stats["predictions"] += 1
        if emit is not None:
            emit(tick, values)

    start = time.perf_counter()
    while True:
        item = q.get()
        if item is None:
            break
        if isinstance(item, BaseException):
            raise item
        t, r = item
        if state["t0"] is None:
            state["t0"], state["next"], state["wall0"] = t, t, time.perf_counter()
        while t > state["next"]:
            stats["ticks"] += 1
            fire(state["next"])
            state["next"] += TICK_US
        buf_t.append(t)
        buf_r.append(r)
        if t == state["next"]:
            stats["ticks"] += 1
            fire(t)
            state["next"] += TICK_US
    th.join()
    elapsed = time.perf_counter() - start
    stats["elapsed_s"] = elapsed
    stats["rate_hz"] = stats["predictions"] / elapsed if elapsed > 0 else float("inf")
    return stats


def _value_columns(model) -> list:
    if model.config.output_dim == 12:
        return [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]
    return [f"c{i}" for i in range(model.config.output_dim)]


def cmd_replay(args) -> dict:
    model = load_model(args.model)
    if model.norm_stats is None:
        raise ConfigError("model file carries no normalisation statistics")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["t_us"] + _value_columns(model)) + "\n")

        def emit(t, values):
            fh.write(f"{t}," + ",".join(repr(float(v)) for v in values) + "\n")

        stats = replay_stream(model, args.sensors, args.realtime, emit)
    mode = "realtime" if args.realtime else "batch"
    print(f"{stats['predictions']} predictions in {stats['elapsed_s']:.2f} s ({mode}), "
          f"{stats['rate_hz']:.1f} Hz, {stats['underruns']} underruns")
    return {"config": [], "inputs": [args.model, args.sensors], "outputs": [args.out], "seeds": {},
            "out_dir": os.path.dirname(os.path.abspath(args.out)), "extra": {"replay": stats}}


def cmd_export_grid(args) -> dict:
    model = load_model(args.model)
    if model.norm_stats is None:
        raise ConfigError("model file carries no normalisation statistics")
    res = int(args.res)
    if res < 2:
        raise ConfigError("grid resolution must be at least 2")
    joint = model.config.output_dim == 12
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="\n", encoding="utf-8") as fh:
        if joint:
            fh.write(",".join(["t_us"] + _value_columns(model)) + "\n")
        else:
            fh.write("t_us,i,j,x,y,z\n")

        def emit(t, values):
            if joint:
                fh.write(f"{t}," + ",".join(repr(float(v)) for v in values) + "\n")
                return
            pts = sample_grid(decode_output(values), res, res)
            for k, p in enumerate(pts):
                fh.write(f"{t},{k // res},{k % res}," + ",".join(repr(float(x)) for x in p) + "\n")

        replay_stream(model, args.sensors, False, emit)
    return {"config": [], "inputs": [args.model, args.sensors], "outputs": [args.out], "seeds": {},
            "out_dir": os.path.dirname(os.path.abspath(args.out))}


# --------------------------------------------------------------------------- parser

COMMANDS = {
    "simulate": cmd_simulate, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "resolution": cmd_resolution, "replay": cmd_replay,
    "export-grid": cmd_export_grid,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softrecon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, config_required=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--out", required=True, help="output directory (file for replay/export-grid)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--config", required=config_required)
        return s

    add("simulate", "generate synthetic sensor and marker logs", True)
    s = add("prepare", "synchronise, label, split and normalise logs")
    s.add_argument("--logs", required=True)
    s.add_argument("--layout", help="layout JSON (default: <logs>/layout.json)")
    s = add("train", "train one model on a prepared dataset", True)
    s.add_argument("--data", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s = add("eval", "evaluate saved models or train and compare configs")
    s.add_argument("--data", required=True)
    s.add_argument("--model", action="append")
    s = add("ablate", "retrain on sensor subsets", True)
    s.add_argument("--data", required=True)
    s = add("resolution", "control-grid size study", True)
    s.add_argument("--data", required=True)
    for name in ("replay", "export-grid"):
        s = add(name, "stream predictions over a sensor log" if name == "replay"
                else "write a 30x30 grid (membrane) or transform (joint) per tick")
        s.add_argument("--model", required=True)
        s.add_argument("--sensors", required=True)
        if name == "replay":
            s.add_argument("--realtime", action="store_true")
        else:
            s.add_argument("--res", type=int, default=30)
    return p


def _thread_limit():
    raw = os.environ.get("SOFTRECON_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SOFTRECON_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("SOFTRECON_THREADS must be at least 1")
    return n


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            result = COMMANDS[args.command](args)
        out_dir = result.get("out_dir", args.out)
        extra = dict(result.get("extra", {}))
        if "failure" in result:
            extra["failure"] = result["failure"]
        write_manifest(out_dir, args.command, argv, result["config"], result["inputs"], result["outputs"],
                       result["seeds"], started, extra)
        if "failure" in result:
            print(f"error: {result['failure']}", file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK
    except (ConfigError, DimMismatch, UnknownBatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, CorruptFile, VersionMismatch) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, NumericFailure, SolverStalled, RankDeficient, DegenerateMatrix) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
