"""Command-line entry point.

Every command reads an optional JSON config and applies flag overrides on
top. The config has up to four sections::

    {"seed": 0,
     "train": {"arch": "cnn", "epochs": 15, "lr": 0.05},
     "conversion": {...ConversionConfig fields...},
     "calibration": {...CalibrationConfig fields...}}

Data always comes from the desk digits benchmark split by ``seed``. Errors
are reported as one JSON line on stderr; exit code 2 means a config or file
problem, 3 a numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import benchmark, harness, plotting
from .ann import train_sgd
from .calibrate import CalibrationConfig, avg_bias_calibrate, ftbc_calibrate, solve_bias_star
from .convert import ConversionConfig, build_snn
from .errors import CalibrationError, ConfigError, DimensionError, FormatError, ThresholdError, TrainingError
from .formats import load_model, load_snn, save_model, save_snn

TRAIN_DEFAULTS = {"arch": "cnn", "epochs": 15, "lr": 0.05}
PROP1_TARGETS = (0.1, 0.25, 0.5, 0.75, 0.9)
PROP1_SAMPLES = 100_000


# ---------------------------------------------------------------------------
# config


def load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(cfg) - {"seed", "train", "conversion", "calibration"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    calib = dict(cfg.get("calibration", {}))
    calib.setdefault("seed", seed)
    for flag, key in (("T", "T"), ("alpha", "alpha"), ("iters", "iterations"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            calib[key] = value
    if args.seed is not None:
        calib["seed"] = args.seed
    train = {**TRAIN_DEFAULTS, **cfg.get("train", {})}
    unknown = set(train) - set(TRAIN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown train fields: {sorted(unknown)}")
    if train["arch"] not in ("cnn", "mlp"):
        raise ConfigError(f"train.arch must be cnn or mlp, got {train['arch']!r}")
    return {
        "seed": int(seed),
        "train": train,
        "conversion": ConversionConfig.from_dict(cfg.get("conversion", {})),
        "calibration": CalibrationConfig.from_dict(calib),
    }


def _splits(cfg: dict, arch: str):
    train, calib, test = benchmark.digits_splits(cfg["seed"])
    if arch == "mlp":
        train, calib, test = (
            harness.Dataset(d.inputs.reshape(len(d), -1), d.labels, d.split) for d in (train, calib, test)
        )
    return train, calib, test


def _arch_of(model) -> str:
    return "mlp" if len(model.input_shape) == 1 else "cnn"


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def _write_rows(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _eval_timesteps(T: int | None) -> list[int]:
    if T is None:
        return list(benchmark.EVAL_TIMESTEPS)
    ts = [t for t in benchmark.EVAL_TIMESTEPS if t <= T]
    return ts if ts and ts[-1] == T else ts + [T]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg, out: Path) -> None:
    t = cfg["train"]
    train, _, test = _splits(cfg, t["arch"])
    model = benchmark.desk_mlp(cfg["seed"]) if t["arch"] == "mlp" else benchmark.desk_cnn(cfg["seed"])
    model = train_sgd(model, train, t["epochs"], t["lr"], cfg["seed"])
    save_model(model, out / "model.json")
    acc = harness.ann_accuracy(model, test)
    print(f"train accuracy {model.train_accuracy:.4f} test accuracy {acc:.4f}")


def cmd_convert(args, cfg, out: Path) -> None:
    model = load_model(_require(args.model, "model"))
    _, calib, _ = _splits(cfg, _arch_of(model))
    snn = build_snn(model, cfg["conversion"], calib)
    save_snn(snn, out / "snn.json")
    print("thresholds: " + " ".join(f"{np.mean(t):.4g}" for t in snn.thresholds))


def cmd_calibrate(args, cfg, out: Path) -> None:
    snn = load_snn(_require(args.snn, "snn"))
    _, calib, _ = _splits(cfg, _arch_of(snn.ann))
    ccfg = cfg["calibration"]
    method = args.method or "ftbc"
    rows = []
    if method == "ftbc":
        model, traj = ftbc_calibrate(snn.ann, snn, calib, ccfg)
        rows = [
            {"iteration": r.iteration, "t": r.t, "accuracy": "" if r.accuracy is None else r.accuracy,
             "layer": r.layer, "gap_norm": r.gap_norm}
            for r in traj.rows
        ]
    elif method == "avgbias":
        model = avg_bias_calibrate(snn.ann, snn, calib, ccfg)
    else:
        model = snn
    save_snn(model, out / "snn_calibrated.json", out / "bias.json")
    _write_rows(out / "trajectory.csv", ("iteration", "t", "accuracy", "layer", "gap_norm"), rows)
    print(f"{method} calibration written to {out}")


def cmd_eval(args, cfg, out: Path) -> None:
    snn = load_snn(_require(args.snn, "snn"))
    _, _, test = _splits(cfg, _arch_of(snn.ann))
    ts = _eval_timesteps(args.T)
    method = args.method or ("vanilla" if not snn.bias_table.horizon else "ftbc")
    report = harness.RunReport(
        ts,
        {method: harness.evaluate(snn, test, ts)},
        harness.ann_accuracy(snn.ann, test),
        cfg["seed"],
        config={"readout": snn.readout, "bias_horizon": snn.bias_table.horizon},
    )
    harness.emit_report(report, out / "report.csv")
    harness.emit_report(report, out / "report.json", "json")
    for t, a in zip(ts, report.accuracy[method]):
        print(f"{method} T={t} accuracy {a:.4f}")


def _prop1_distributions(rng):
    mu, sigma = 0.5, 0.15
    scale = 0.3
    return {
        "uniform": (rng.random(PROP1_SAMPLES), lambda p: p),
        "normal": (
            rng.normal(mu, sigma, PROP1_SAMPLES),
            lambda p: 1.0 - NormalDist(mu, sigma).inv_cdf(1.0 - p),
        ),
        "exponential": (rng.exponential(scale, PROP1_SAMPLES), lambda p: 1.0 + scale * np.log(p)),
    }


def cmd_prop1(args, cfg, out: Path) -> None:
    """Stochastic root finding for the bias that hits a target firing probability."""
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for name, (samples, closed) in _prop1_distributions(rng).items():
        for target in PROP1_TARGETS:
            b = solve_bias_star(samples, target, c=0.5, iters=200, seed=cfg["seed"])
            e = float(np.mean(samples + b - 1.0 >= 0.0))
            rows.append({
                "distribution": name,
                "target": target,
                "b": b,
                "b_closed_form": float(closed(target)),
                "expectation": e,
                "residual": e - target,
            })
    _write_rows(out / "prop1.csv", list(rows[0]), rows)
    plotting.bias_sweep(rows, out / "prop1.png")
    for r in rows:
        print(f"{r['distribution']} target {r['target']}: b {r['b']:.4f} closed form {r['b_closed_form']:.4f}")


def _pipeline(cfg, track_validation=False):
    t = cfg["train"]
    return benchmark.run_pipeline(
        cfg["seed"], t["arch"], t["epochs"], t["lr"], cfg["conversion"], cfg["calibration"], track_validation
    )


def cmd_stability(args, cfg, out: Path) -> None:
    run = _pipeline(cfg, track_validation=True)
    its, m = run.trajectory.accuracy_matrix()
    rows = [{"iteration": it, "T": t + 1, "accuracy": m[i, t]} for i, it in enumerate(its) for t in range(m.shape[1])]
    _write_rows(out / "stability.csv", ("iteration", "T", "accuracy"), rows)
    plotting.stability(its, m, out / "stability.png")
    tail = m[-5:]
    for t in (8, 16, 32):
        if t <= m.shape[1]:
            print(f"T={t} std over last 5 iterations {np.std(tail[:, t - 1]) * 100:.3f} pp")


def cmd_report(args, cfg, out: Path) -> None:
    run = _pipeline(cfg)
    report = benchmark.compare_methods(run, calibration=cfg["calibration"])
    if args.method:
        report.accuracy = {args.method: report.accuracy[args.method]}
    T = cfg["calibration"].T
    before = harness.expected_gap(run.ann, run.vanilla, run.calib, T)
    after = harness.expected_gap(run.ann, run.ftbc, run.calib, T)
    report.gap_stats = {
        f"layer{l}": {
            "before": np.abs(b).mean(axis=1).tolist(),
            "after": np.abs(a).mean(axis=1).tolist(),
        }
        for l, (b, a) in enumerate(zip(before, after))
    }
    report.config.update(train=cfg["train"], conversion=cfg["conversion"].to_dict())
    (out / "timing.json").write_text(json.dumps(report.timing, indent=2) + "\n")
    report.timing = {}
    harness.emit_report(report, out / "report.csv")
    harness.emit_report(report, out / "report.json", "json")
    plotting.accuracy_vs_timesteps(report, out / "accuracy.png")
    mid = len(run.ftbc.layers) // 2
    counts, edges = harness.membrane_histogram(run.ftbc, run.test, mid, 4, bins=40)
    plotting.membrane_histogram(counts, edges, out / "membrane.png", f"layer {mid}, t=4, channel 0")
    for method, accs in report.accuracy.items():
        print(method + " " + " ".join(f"T{t}={a:.3f}" for t, a in zip(report.timesteps, accs)))
    print(f"ann {report.ann_accuracy:.3f}")


COMMANDS = {
    "train": (cmd_train, "train the desk model"),
    "convert": (cmd_convert, "convert a trained model to an SNN"),
    "calibrate": (cmd_calibrate, "calibrate temporal biases of an SNN"),
    "eval": (cmd_eval, "evaluate an SNN at several timestep counts"),
    "prop1": (cmd_prop1, "bias root-finding sweep over targets and distributions"),
    "stability": (cmd_stability, "per-iteration accuracy during calibration"),
    "report": (cmd_report, "vanilla / FTBC / average-bias comparison"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--T", type=int, help="calibration horizon; for eval the largest T evaluated")
    common.add_argument("--alpha", type=float)
    common.add_argument("--iters", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--method", choices=("vanilla", "ftbc", "avgbias"))
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--model", help="trained model JSON (convert)")
    common.add_argument("--snn", help="SNN model JSON (calibrate, eval)")
    parser = argparse.ArgumentParser(prog="snncal", description="ANN to SNN conversion with temporal bias calibration")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](args, cfg, out)
    except (ConfigError, FormatError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except (TrainingError, ThresholdError, CalibrationError, DimensionError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc), 3)
    except (TypeError, ValueError) as exc:
        # malformed config values surface here (e.g. a string where a number belongs)
        return _fail(type(exc).__name__, str(exc), 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
