"""Desk-scale reference benchmark: 8x8 handwritten digits through IDX files.

The digits ship with scikit-learn; they are written once to IDX files under a
cache directory and read back through :func:`snncal.harness.load_idx`, so the
benchmark exercises the same ingestion path as external IDX data.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ann import AnnModel, build_cnn, build_mlp, train_sgd
from .calibrate import CalibrationConfig, avg_bias_calibrate, ftbc_calibrate
from .convert import ConversionConfig, build_snn
from .harness import Dataset, RunReport, ann_accuracy, evaluate, load_idx, write_idx
from .snn_sim import SnnModel

EVAL_TIMESTEPS = (1, 2, 4, 8, 16, 32, 64, 128, 256)


def cache_dir() -> Path:
    d = Path(os.environ.get("SNNCAL_CACHE", Path.home() / ".cache" / "snncal"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def digits_idx_files(directory=None) -> tuple[Path, Path]:
    directory = Path(directory) if directory else cache_dir()
    img, lab = directory / "digits-images-idx3-ubyte", directory / "digits-labels-idx1-ubyte"
    if not (img.exists() and lab.exists()):
        from sklearn.datasets import load_digits

        d = load_digits()
        # 0..16 intensities -> 0..255
        pixels = np.minimum(d.images * 16, 255).astype(np.uint8)
        write_idx(img, lab, pixels, d.target)
    return img, lab


def digits_splits(
    seed: int = 0, n_calib: int = 64, n_test: int = 400, dequantize: bool = True
) -> tuple[Dataset, Dataset, Dataset]:
    """(train, calib, test); the calibration split is disjoint from training and test.

    With ``dequantize`` each pixel is spread uniformly over its original
    intensity level (17 levels), so inputs are continuous rather than a few
    repeated values.
    """
    full = load_idx(*digits_idx_files())
    if dequantize:
        levels = np.rint(full.inputs * 255 / 16)
        noise = np.random.default_rng(10_000 + seed).random(full.inputs.shape)
        full = Dataset((levels + noise) / 17.0, full.labels, full.split)
    order = np.random.default_rng(seed).permutation(len(full))
    test = full.subset(order[:n_test], "test")
    calib = full.subset(order[n_test : n_test + n_calib], "calib")
    train = full.subset(order[n_test + n_calib :], "train")
    return train, calib, test


def desk_cnn(seed: int = 0) -> AnnModel:
    return build_cnn((1, 8, 8), (8, 16, 32), (False, True, True), 10, seed)


def desk_mlp(seed: int = 0) -> AnnModel:
    return build_mlp(64, (64, 32), 10, seed)


@dataclass
class BenchmarkRun:
    ann: AnnModel  # the folded + scaled ANN that the SNN mirrors
    vanilla: SnnModel
    ftbc: SnnModel
    train: Dataset
    calib: Dataset
    test: Dataset
    ann_acc: float
    source: AnnModel | None = None  # the trained model before folding and scaling
    trajectory: object = None
    timing: dict = field(default_factory=dict)


def run_pipeline(
    seed: int = 0,
    arch: str = "cnn",
    epochs: int = 15,
    lr: float = 0.05,
    conversion: ConversionConfig | None = None,
    calibration: CalibrationConfig | None = None,
    track_validation: bool = False,
) -> BenchmarkRun:
    """Train, convert and FTBC-calibrate one desk model."""
    conversion = conversion or ConversionConfig()
    calibration = calibration or CalibrationConfig(seed=seed)
    timing = {}
    train, calib, test = digits_splits(seed)
    if arch == "mlp":
        train, calib, test = (
            Dataset(d.inputs.reshape(len(d), -1), d.labels, d.split) for d in (train, calib, test)
        )
        model = desk_mlp(seed)
    else:
        model = desk_cnn(seed)
    t0 = time.perf_counter()
    model = train_sgd(model, train, epochs, lr, seed)
    timing["train_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    vanilla = build_snn(model, conversion, calib)
    timing["convert_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ftbc, traj = ftbc_calibrate(
        vanilla.ann, vanilla, calib, calibration, validation=test if track_validation else None
    )
    timing["calibrate_s"] = time.perf_counter() - t0
    return BenchmarkRun(
        vanilla.ann, vanilla, ftbc, train, calib, test, ann_accuracy(vanilla.ann, test), model, traj, timing
    )


def compare_methods(
    run: BenchmarkRun,
    timesteps=EVAL_TIMESTEPS,
    avg_bias_T=(1, 2, 4, 8, 16, 32),
    calibration: CalibrationConfig | None = None,
) -> RunReport:
    """Accuracy table for vanilla / FTBC / average-bias.

    The average-bias baseline is recalibrated for each evaluated T up to
    ``max(avg_bias_T)``; larger T reuse the largest calibrated one.
    """
    calibration = calibration or CalibrationConfig()
    ts = list(timesteps)
    acc = {
        "vanilla": evaluate(run.vanilla, run.test, ts),
        "ftbc": evaluate(run.ftbc, run.test, ts),
    }
    avg_acc = []
    cache: dict[int, SnnModel] = {}
    for t in ts:
        tc = max([a for a in avg_bias_T if a <= t] or [min(avg_bias_T)])
        if tc not in cache:
            cfg = CalibrationConfig(**{**calibration.to_dict(), "T": tc})
            cache[tc] = avg_bias_calibrate(run.ann, run.vanilla, run.calib, cfg)
        avg_acc.append(evaluate(cache[tc], run.test, [t])[0])
    acc["avgbias"] = avg_acc
    return RunReport(ts, acc, run.ann_acc, calibration.seed, config={"calibration": calibration.to_dict()}, timing=run.timing)
