"""On-disk formats: JSON documents with little-endian float64 sidecar blobs.

Model (``*.json`` + ``*.bin``)::

    {"format_version": 1, "input_shape": [...], "weights_file": "model.bin",
     "layers": [{"kind": ..., <metadata>, "params": [{"name", "shape", "offset"}]}]}

Offsets count float64 values from the start of the blob. An SNN model adds
``thresholds`` (one list per spiking layer), ``initial_potential`` and
``readout``. A bias table is ``{"format_version", "horizon", "channel_counts",
"blob", "entries": [{"layer", "timestep", "channel_count", "offset"}]}``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ann import ActivationSpec, AnnModel, LayerSpec
from .errors import FormatError
from .snn_sim import BiasTable, SnnModel

FORMAT_VERSION = 1
_LE = np.dtype("<f8")
_PARAMS = ("weight", "bias", "gamma", "beta", "mean", "var")


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def _read_blob(path: Path, expected: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != expected * 8:
        raise FormatError(f"{path}: expected {expected * 8} bytes, found {len(raw)}", offset=len(raw))
    return np.frombuffer(raw, dtype=_LE).astype(np.float64)


def _layer_doc(layer: LayerSpec, chunks: list, cursor: list) -> dict:
    d: dict = {"kind": layer.kind}
    if layer.kind == "conv2d":
        d.update(stride=layer.stride, pad=layer.pad)
    elif layer.kind == "avgpool":
        d["pool"] = layer.pool
    elif layer.kind == "batchnorm":
        d["eps"] = layer.eps
    elif layer.kind == "activation":
        a = layer.activation
        d["activation"] = {"name": a.name, "a": a.a, "l": a.l}
    params = []

    def put(name, arr):
        params.append({"name": name, "shape": list(arr.shape), "offset": cursor[0]})
        chunks.append(np.ascontiguousarray(arr, dtype=_LE).ravel())
        cursor[0] += arr.size

    for name in _PARAMS:
        v = getattr(layer, name)
        if v is not None:
            put(name, v)
    if layer.kind == "activation" and layer.activation.scale is not None:
        put("scale", layer.activation.scale)
    d["params"] = params
    return d


def _model_doc(model: AnnModel, blob_name: str):
    chunks: list = []
    cursor = [0]
    layers = [_layer_doc(l, chunks, cursor) for l in model.layers]
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "weights_file": blob_name,
    }
    if model.train_accuracy is not None:
        doc["train_accuracy"] = model.train_accuracy
    blob = np.concatenate(chunks).astype(_LE).tobytes() if chunks else b""
    return doc, blob


def _model_from_doc(doc: dict, base: Path) -> AnnModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {doc.get('format_version')!r}")
    total = sum(int(np.prod(p["shape"])) for l in doc["layers"] for p in l["params"])
    blob = _read_blob(base / doc["weights_file"], total)
    layers = []
    for ld in doc["layers"]:
        arrs = {}
        for p in ld["params"]:
            n = int(np.prod(p["shape"]))
            arrs[p["name"]] = blob[p["offset"] : p["offset"] + n].reshape(p["shape"]).copy()
        kw = {k: arrs[k] for k in _PARAMS if k in arrs}
        if ld["kind"] == "conv2d":
            kw.update(stride=ld["stride"], pad=ld["pad"])
        elif ld["kind"] == "avgpool":
            kw["pool"] = ld["pool"]
        elif ld["kind"] == "batchnorm":
            kw["eps"] = ld["eps"]
        elif ld["kind"] == "activation":
            a = ld["activation"]
            kw["activation"] = ActivationSpec(a["name"], a["a"], a["l"], arrs.get("scale"))
        layers.append(LayerSpec(ld["kind"], **kw))
    return AnnModel(layers, tuple(doc["input_shape"]), doc.get("train_accuracy"))


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_model(model: AnnModel, path) -> None:
    path = Path(path)
    doc, blob = _model_doc(model, _blob_path(path).name)
    _blob_path(path).write_bytes(blob)
    _dump_json(path, doc)


def load_model(path) -> AnnModel:
    path = Path(path)
    doc = _load_json(path)
    if "thresholds" in doc:
        raise FormatError(f"{path} is an SNN model; use load_snn")
    return _model_from_doc(doc, path.parent)


def save_snn(snn: SnnModel, path, bias_path=None) -> None:
    """Write an SNN model; the bias table is written alongside when ``bias_path`` is given."""
    path = Path(path)
    doc, blob = _model_doc(snn.ann, _blob_path(path).name)
    doc["thresholds"] = [t.tolist() for t in snn.thresholds]
    doc["initial_potential"] = snn.initial_potential
    doc["readout"] = snn.readout
    if bias_path is not None:
        bias_path = Path(bias_path)
        save_bias_table(snn.bias_table, bias_path)
        doc["bias_table"] = bias_path.name
    _blob_path(path).write_bytes(blob)
    _dump_json(path, doc)


def load_snn(path) -> SnnModel:
    path = Path(path)
    doc = _load_json(path)
    if "thresholds" not in doc:
        raise FormatError(f"{path} has no thresholds; not an SNN model")
    ann = _model_from_doc(doc, path.parent)
    table = load_bias_table(path.parent / doc["bias_table"]) if "bias_table" in doc else None
    return SnnModel(
        ann,
        [np.asarray(t, dtype=np.float64) for t in doc["thresholds"]],
        doc.get("initial_potential", "zero"),
        table,
        doc.get("readout", "mean"),
    )


def save_bias_table(table: BiasTable, path) -> None:
    path = Path(path)
    entries, chunks, off = [], [], 0
    for l, c in enumerate(table.channel_counts):
        for t in range(1, table.horizon + 1):
            entries.append({"layer": l, "timestep": t, "channel_count": c, "offset": off})
            chunks.append(table.values[l][t - 1])
            off += c
    blob = np.concatenate(chunks).astype(_LE).tobytes() if chunks else b""
    _blob_path(path).write_bytes(blob)
    _dump_json(
        path,
        {
            "format_version": FORMAT_VERSION,
            "horizon": table.horizon,
            "channel_counts": table.channel_counts,
            "blob": _blob_path(path).name,
            "entries": entries,
        },
    )


def load_bias_table(path) -> BiasTable:
    path = Path(path)
    doc = _load_json(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {doc.get('format_version')!r}")
    counts = doc["channel_counts"]
    horizon = doc["horizon"]
    blob = _read_blob(path.parent / doc["blob"], sum(e["channel_count"] for e in doc["entries"]))
    table = BiasTable.zeros(counts, horizon)
    for e in doc["entries"]:
        l, t, c = e["layer"], e["timestep"], e["channel_count"]
        if c != counts[l] or not 1 <= t <= horizon:
            raise FormatError(f"bias entry (layer {l}, t {t}) inconsistent with header")
        table.values[l][t - 1] = blob[e["offset"] : e["offset"] + c]
    return table
