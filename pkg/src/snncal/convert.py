"""ANN to SNN conversion: threshold initialisation, weight scaling, SnnModel construction."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .ann import ActivationSpec, AnnModel, forward_collect, fold_batchnorm
from .errors import ConfigError, StructureError, ThresholdError
from .snn_sim import INITIAL_POLICIES, SnnModel

MIN_THRESHOLD = 1e-6


@dataclass(frozen=True)
class ThresholdPolicy:
    kind: str = "percentile"
    p: float = 99.9
    granularity: str = "channel"

    def __post_init__(self):
        if self.kind not in ("max", "percentile"):
            raise ConfigError(f"threshold policy kind must be 'max' or 'percentile', got {self.kind!r}")
        if self.kind == "percentile" and not 0 < self.p <= 100:
            raise ConfigError(f"percentile p must lie in (0, 100], got {self.p}")
        if self.granularity not in ("layer", "channel"):
            raise ConfigError(f"granularity must be 'layer' or 'channel', got {self.granularity!r}")


@dataclass(frozen=True)
class ConversionConfig:
    threshold_policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    scale_weights: bool = True
    initial_potential_policy: str = "zero"
    calibration_samples: int = 256

    def __post_init__(self):
        if self.calibration_samples < 1:
            raise ConfigError("calibration_samples must be >= 1")
        if self.initial_potential_policy not in INITIAL_POLICIES:
            raise ConfigError(f"initial_potential_policy must be one of {INITIAL_POLICIES}")

    @classmethod
    def from_dict(cls, d: dict) -> "ConversionConfig":
        d = dict(d)
        known = {"threshold_policy", "scale_weights", "initial_potential_policy", "calibration_samples"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown conversion fields: {sorted(unknown)}")
        if "threshold_policy" in d:
            d["threshold_policy"] = ThresholdPolicy(**d["threshold_policy"])
        return cls(**d)

    def to_dict(self) -> dict:
        tp = self.threshold_policy
        return {
            "threshold_policy": {"kind": tp.kind, "p": tp.p, "granularity": tp.granularity},
            "scale_weights": self.scale_weights,
            "initial_potential_policy": self.initial_potential_policy,
            "calibration_samples": self.calibration_samples,
        }


def _inputs(data) -> np.ndarray:
    return np.asarray(getattr(data, "inputs", data), dtype=np.float64)


def init_thresholds(model: AnnModel, data, policy: ThresholdPolicy, chunk: int = 256) -> list[np.ndarray]:
    """Per-layer threshold vectors (length C) from captured post-activation statistics."""
    x = _inputs(data)
    if len(x) == 0:
        raise ThresholdError("threshold initialisation needs at least one sample")
    if not model.spiking_stages:
        raise ThresholdError("model has no spiking-equivalent layer")
    per_layer: list[list[np.ndarray]] = [[] for _ in model.spiking_stages]
    for start in range(0, len(x), chunk):
        _, acts = forward_collect(model, x[start : start + chunk])
        for l, a in acts.items():
            # channel-major: C x (samples * positions)
            per_layer[l].append(np.moveaxis(a, 1, 0).reshape(a.shape[1], -1))
    out = []
    for l, blocks in enumerate(per_layer):
        vals = np.concatenate(blocks, axis=1)
        if not np.any(vals):
            raise ThresholdError(f"layer {l}: all captured activations are zero")
        stat = np.max if policy.kind == "max" else (lambda v: tc.percentile(v, policy.p))
        if policy.granularity == "layer":
            th = np.full(vals.shape[0], stat(vals))
        else:
            th = np.array([stat(row) for row in vals])
        out.append(np.maximum(th, MIN_THRESHOLD))
    return out


def _input_channel_map(stage_ops, in_shape) -> np.ndarray:
    """Channel index of every input element reaching the stage's weighted layer."""
    chan = np.broadcast_to(
        np.arange(in_shape[0], dtype=np.float64).reshape((-1,) + (1,) * (len(in_shape) - 1)), in_shape
    )[None]
    for op in stage_ops:
        if op.kind in ("linear", "conv2d"):
            break
        chan = op.forward(chan)
    return np.rint(chan[0]).astype(np.int64)


def scale_weights(model: AnnModel, thresholds) -> tuple[AnnModel, list[np.ndarray]]:
    """Rescale so every threshold becomes 1.

    Weights of layer l are multiplied by theta_prev/theta_cur per (output,
    input-channel) pair and biases divided by theta_cur; the input layer uses
    theta_prev = 1 and the readout theta_cur = 1.
    """
    thresholds = [np.asarray(t, dtype=np.float64) for t in thresholds]
    if any(np.any(t <= 0) for t in thresholds):
        raise ValueError("thresholds must be positive")
    stages = model.spiking_stages + [model.readout]
    new_layers = []
    prev_theta = None
    in_shape = model.input_shape
    for st in stages:
        weighted = [op for op in st.ops if op.kind in ("linear", "conv2d")]
        if len(weighted) != 1 or any(op.kind == "batchnorm" for op in st.ops):
            raise StructureError(
                f"stage {st.index}: weight scaling needs exactly one linear/conv layer and folded batchnorm"
            )
        is_readout = st.act is None
        cur = np.ones(weighted[0].weight.shape[0]) if is_readout else thresholds[st.index]
        cmap = _input_channel_map(st.ops, in_shape)
        for op in st.ops:
            if op is not weighted[0]:
                new_layers.append(op)
                continue
            w = op.weight
            if prev_theta is None:
                in_scale = np.ones(w.shape[1])
            elif op.kind == "conv2d":
                in_scale = prev_theta
            else:
                in_scale = prev_theta[cmap.reshape(-1)]
            shape = (-1, w.shape[1]) + (1,) * (w.ndim - 2)
            w2 = w * in_scale.reshape(shape) / cur.reshape((-1,) + (1,) * (w.ndim - 1))
            b2 = None if op.bias is None else op.bias / cur
            new_layers.append(replace(op, weight=w2, bias=b2))
        if not is_readout:
            act = st.act
            if act.name != "relu":
                act = ActivationSpec(act.name, act.a, act.l, cur.copy() if act.scale is None else act.scale * cur)
            new_layers.append(replace(_activation_layer(model, st), activation=act))
            in_shape = model.stage_shapes[st.index]
            prev_theta = cur
    return AnnModel(new_layers, model.input_shape, model.train_accuracy), [np.ones_like(t) for t in thresholds]


def _activation_layer(model: AnnModel, stage):
    for layer in model.layers:
        if layer.kind == "activation" and layer.activation is stage.act:
            return layer
    raise StructureError("activation layer not found")


def build_snn(model: AnnModel, config: ConversionConfig, data) -> SnnModel:
    """Fold batchnorm, initialise thresholds, optionally scale, and wrap as an SnnModel."""
    folded = fold_batchnorm(model)
    x = _inputs(data)[: config.calibration_samples]
    thresholds = init_thresholds(folded, x, config.threshold_policy)
    if config.scale_weights:
        folded, thresholds = scale_weights(folded, thresholds)
    return SnnModel(folded, thresholds, config.initial_potential_policy)
