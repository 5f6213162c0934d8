"""Datasets, metrics and run reports."""
from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .ann import AnnModel, forward_collect
from .errors import FormatError
from .snn_sim import SnnModel, run

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.split not in ("train", "calib", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split)


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("truncated IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError("truncated IDX dimension block", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) < head + n:
        raise FormatError(f"IDX payload truncated: need {n} bytes", offset=len(raw))
    if len(raw) > head + n:
        raise FormatError("trailing bytes after IDX payload", offset=head + n)
    return np.frombuffer(raw, dtype=np.uint8, offset=head, count=n).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] with a channel axis added."""
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS)
    if len(imgs) != len(labels):
        raise FormatError(f"{len(imgs)} images but {len(labels)} labels")
    x = imgs.astype(np.float64)[:, None] / 255.0
    return Dataset(x, labels.astype(np.int64), split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``N x H x W`` images and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES) + struct.pack(">3I", *images.shape) + images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS) + struct.pack(">I", len(labels)) + labels.tobytes())


def synth_dataset(classes: int, dims, n: int, seed: int, separation: float, split: str = "train") -> Dataset:
    """Isotropic unit-variance Gaussian blobs; class means are ``separation`` apart pairwise."""
    if classes < 2 or n < classes:
        raise ValueError("need classes >= 2 and n >= classes")
    dims = (dims,) if np.isscalar(dims) else tuple(dims)
    d = int(np.prod(dims))
    rng = np.random.default_rng(seed)
    # simplex-like means: scaled one-hot directions (pairwise distance = separation)
    means = np.zeros((classes, d))
    for k in range(classes):
        means[k, k % d] = separation / np.sqrt(2.0)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = means[labels] + rng.normal(size=(n, d))
    return Dataset(x.reshape((n,) + dims), labels, split)


# ---------------------------------------------------------------------------
# metrics

def ann_accuracy(model: AnnModel, data: Dataset) -> float:
    return float(np.mean(model.predict(data.inputs) == data.labels))


def evaluate(snn: SnnModel, data: Dataset, timesteps, chunk: int = 512) -> list[float]:
    """Accuracy of argmax(readout[t]) for each requested t, from one run to max(timesteps)."""
    ts = [int(t) for t in timesteps]
    if ts != sorted(ts) or not ts or ts[0] < 1:
        raise ValueError("timesteps must be positive and sorted ascending")
    want = set(ts)
    correct = {t: 0 for t in ts}
    for start in range(0, len(data), chunk):
        x = data.inputs[start : start + chunk]
        y = data.labels[start : start + chunk]
        for t, _, state in run(snn, x, ts[-1]):
            if t in want:
                correct[t] += int(np.sum(np.argmax(state.readout_sum, axis=1) == y))
    return [correct[t] / len(data) for t in ts]


def expected_gap(ann: AnnModel, snn: SnnModel, data: Dataset, T: int, chunk: int = 512) -> list[np.ndarray]:
    """Per layer a ``T x C`` array of channel_mean(a - s(t)) averaged over ``data``."""
    sums = [np.zeros((T, c)) for c in snn.ann.channel_counts()]
    n = len(data)
    for start in range(0, n, chunk):
        x = data.inputs[start : start + chunk]
        _, acts = forward_collect(ann, x)
        w = len(x) / n
        for t, spikes, _ in run(snn, x, T):
            for l, s in enumerate(spikes):
                sums[l][t - 1] += w * tc.channel_mean(acts[l] - s)
    return sums


def membrane_histogram(
    snn: SnnModel, data: Dataset, layer: int, t: int, bins: int, channel: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Histogram (counts, edges) of pre-firing potentials of one channel at timestep ``t``."""
    if not 0 <= layer < len(snn.layers):
        raise IndexError(f"layer {layer} out of range")
    vals = []
    for step_t, _, state in run(snn, data.inputs, t):
        if step_t == t:
            vals = state.pre_fire[layer][:, channel].ravel()
    return np.histogram(vals, bins=bins)


def iqr_occupancy(counts: np.ndarray, edges: np.ndarray, values) -> float:
    """Fraction of non-empty bins among bins whose centre lies in the interquartile span."""
    q1, q3 = np.percentile(values, [25, 75])
    centres = (edges[:-1] + edges[1:]) / 2
    inside = (centres >= q1) & (centres <= q3)
    if not inside.any():
        return 1.0 if counts.sum() else 0.0
    return float(np.mean(counts[inside] > 0))


# ---------------------------------------------------------------------------
# reports

CSV_FIELDS = ("method", "T", "accuracy", "ann_accuracy", "seed")


@dataclass
class RunReport:
    timesteps: list[int]
    accuracy: dict[str, list[float]]
    ann_accuracy: float
    seed: int = 0
    gap_stats: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timesteps = [int(t) for t in self.timesteps]
        if any(b <= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ValueError("timesteps must be strictly increasing")
        accs = [self.ann_accuracy] + [a for v in self.accuracy.values() for a in v]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError("accuracies must lie in [0, 1]")
        for m, v in self.accuracy.items():
            if len(v) != len(self.timesteps):
                raise ValueError(f"method {m!r}: {len(v)} accuracies for {len(self.timesteps)} timesteps")

    def to_dict(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "accuracy": self.accuracy,
            "ann_accuracy": self.ann_accuracy,
            "seed": self.seed,
            "gap_stats": self.gap_stats,
            "config": self.config,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    def rows(self):
        for method, accs in self.accuracy.items():
            for t, a in zip(self.timesteps, accs):
                yield {"method": method, "T": t, "accuracy": a, "ann_accuracy": self.ann_accuracy, "seed": self.seed}


def emit_report(report: RunReport, path, format: str = "csv") -> None:
    path = Path(path)
    try:
        if format == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        elif format == "csv":
            with open(path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
                w.writeheader()
                w.writerows(report.rows())
        else:
            raise ValueError(f"unknown report format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> RunReport:
    path = Path(path)
    if path.suffix == ".json":
        return RunReport.from_dict(json.loads(path.read_text()))
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    ts = sorted({int(r["T"]) for r in rows})
    acc: dict[str, dict[int, float]] = {}
    for r in rows:
        acc.setdefault(r["method"], {})[int(r["T"])] = float(r["accuracy"])
    return RunReport(
        ts,
        {m: [v[t] for t in ts] for m, v in acc.items()},
        float(rows[0]["ann_accuracy"]),
        int(rows[0]["seed"]),
    )
