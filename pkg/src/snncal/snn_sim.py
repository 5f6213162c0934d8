"""Integrate-and-fire simulation of converted networks.

Neurons integrate the affine output of their stage, fire a single
threshold-weighted spike when the potential reaches the threshold (equality
fires), and reset by subtraction. The analog input is presented unchanged at
every timestep. A per-layer, per-timestep, per-channel bias from a
:class:`BiasTable` is added to the potential before the firing decision.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .ann import AnnModel, Stage, _channel_view
from .errors import DimensionError

INITIAL_POLICIES = ("zero", "half_threshold")


@dataclass
class BiasTable:
    """Additive bias per (layer, timestep, channel); timesteps are 1-based.

    ``values[layer]`` is a ``horizon x C_layer`` array. Timesteps beyond the
    horizon carry no bias.
    """

    channel_counts: list[int]
    horizon: int = 0
    values: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.channel_counts = [int(c) for c in self.channel_counts]
        if self.values is None:
            self.values = [np.zeros((self.horizon, c)) for c in self.channel_counts]
        for c, v in zip(self.channel_counts, self.values):
            if v.shape != (self.horizon, c):
                raise DimensionError(f"bias block has shape {v.shape}, expected {(self.horizon, c)}")

    @classmethod
    def zeros(cls, channel_counts, horizon: int = 0) -> "BiasTable":
        return cls(list(channel_counts), horizon)

    def get(self, layer: int, t: int) -> np.ndarray | None:
        if t < 1 or t > self.horizon:
            return None
        return self.values[layer][t - 1]

    def add(self, layer: int, t: int, delta: np.ndarray) -> None:
        if not 1 <= t <= self.horizon:
            raise IndexError(f"timestep {t} outside calibrated horizon 1..{self.horizon}")
        self.values[layer][t - 1] += delta

    def set_layer(self, layer: int, row: np.ndarray) -> None:
        """Broadcast one bias vector to every timestep of ``layer``."""
        self.values[layer][...] = row

    def copy(self) -> "BiasTable":
        return BiasTable(self.channel_counts, self.horizon, [v.copy() for v in self.values])

    def entries(self) -> dict[tuple[int, int], np.ndarray]:
        return {(l, t + 1): v[t] for l, v in enumerate(self.values) for t in range(self.horizon)}

    def equals(self, other: "BiasTable") -> bool:
        return (
            self.channel_counts == other.channel_counts
            and self.horizon == other.horizon
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.values, other.values))
        )


@dataclass
class SpikingLayer:
    index: int
    stage: Stage
    threshold: np.ndarray  # shape (C,)

    @property
    def channels(self) -> int:
        return self.threshold.shape[0]


@dataclass
class SnnModel:
    ann: AnnModel
    thresholds: list[np.ndarray]
    initial_potential: str = "zero"
    bias_table: BiasTable | None = None
    readout: str = "mean"

    def __post_init__(self):
        counts = self.ann.channel_counts()
        self.thresholds = [np.asarray(t, dtype=np.float64).reshape(-1) for t in self.thresholds]
        if len(self.thresholds) != len(counts):
            raise DimensionError(f"{len(self.thresholds)} thresholds for {len(counts)} spiking layers")
        for i, (th, c) in enumerate(zip(self.thresholds, counts)):
            if th.size == 1 and c != 1:
                self.thresholds[i] = np.full(c, th[0])
            elif th.size != c:
                raise DimensionError(f"layer {i}: {th.size} thresholds for {c} channels")
            if not np.all(self.thresholds[i] > 0):
                raise ValueError(f"layer {i}: thresholds must be positive")
        if self.initial_potential not in INITIAL_POLICIES:
            raise ValueError(f"unknown initial potential policy {self.initial_potential!r}")
        if self.readout != "mean":
            raise ValueError(f"unknown readout rule {self.readout!r}")
        if self.bias_table is None:
            self.bias_table = BiasTable.zeros(counts, 0)
        elif self.bias_table.channel_counts != counts:
            raise DimensionError("bias table channel counts do not match the network")
        self.layers = [SpikingLayer(i, st, th) for i, (st, th) in enumerate(zip(self.ann.spiking_stages, self.thresholds))]

    def with_bias(self, table: BiasTable) -> "SnnModel":
        return SnnModel(self.ann, self.thresholds, self.initial_potential, table, self.readout)


@dataclass
class SnnState:
    potentials: list[np.ndarray]
    t: int = 0
    pre_fire: list[np.ndarray | None] = field(default_factory=list)
    readout_sum: np.ndarray | None = None


def init_state(model: SnnModel, batch: int) -> SnnState:
    pots = []
    for layer, shape in zip(model.layers, model.ann.stage_shapes):
        v = np.zeros((batch,) + tuple(shape))
        if model.initial_potential == "half_threshold":
            v = v + _channel_view(layer.threshold / 2.0, v.ndim)
        pots.append(v)
    return SnnState(pots, 0, [None] * len(pots))


def spike_layer_forward(layer: SpikingLayer, state: SnnState, input_spikes: np.ndarray, bias=None) -> np.ndarray:
    """One IF step for ``layer``; updates ``state`` in place and returns the weighted spikes."""
    x = layer.stage.affine(input_spikes)
    v = state.potentials[layer.index]
    if x.shape != v.shape:
        raise DimensionError(f"layer {layer.index}: input drives shape {x.shape}, potential is {v.shape}")
    v_temp = v + x
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (layer.channels,):
            raise DimensionError(f"layer {layer.index}: bias length {bias.shape} for {layer.channels} channels")
        if bias.any():
            v_temp = v_temp + _channel_view(bias, v_temp.ndim)
    theta = _channel_view(layer.threshold, v_temp.ndim)
    spikes = np.where(v_temp >= theta, theta, 0.0)
    state.pre_fire[layer.index] = v_temp
    state.potentials[layer.index] = v_temp - spikes
    return spikes


def step(model: SnnModel, state: SnnState, x: np.ndarray) -> list[np.ndarray]:
    """Advance every layer by one timestep; returns the spikes of each layer."""
    state.t += 1
    out, inp = [], x
    for layer in model.layers:
        inp = spike_layer_forward(layer, state, inp, model.bias_table.get(layer.index, state.t))
        out.append(inp)
    z = model.ann.readout.affine(inp)
    state.readout_sum = z if state.readout_sum is None else state.readout_sum + z
    return out


def run(model: SnnModel, x: np.ndarray, T: int) -> Iterator[tuple[int, list[np.ndarray], SnnState]]:
    """Yield ``(t, spikes_per_layer, state)`` after each of ``T`` steps on a batch."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.ann.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input shape {model.ann.input_shape}")
    state = init_state(model, x.shape[0])
    for _ in range(T):
        spikes = step(model, state, x)
        yield state.t, spikes, state


@dataclass
class SpikeTrace:
    input: np.ndarray
    spikes: list[list[np.ndarray]]  # [layer][t-1]
    initial: list[np.ndarray]
    residual: list[np.ndarray]  # v[T] per layer


def simulate(model: SnnModel, x: np.ndarray, T: int, record: bool = False):
    """Run ``T`` steps. Returns (readout per timestep, trace or None).

    ``x`` is a batch, or a single sample shaped like the model input (the
    returned arrays then drop the batch axis).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.ann.input_shape
    if single:
        x = x[None]
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    initial = [v.copy() for v in init_state(model, x.shape[0]).potentials] if record else None
    readouts = []
    spikes_rec = [[] for _ in model.layers]
    state = None
    for t, spikes, state in run(model, x, T):
        readouts.append(state.readout_sum / t)
        if record:
            for l, s in enumerate(spikes):
                spikes_rec[l].append(s)
    if single:
        readouts = [r[0] for r in readouts]
    trace = None
    if record:
        trace = SpikeTrace(x, spikes_rec, initial, [v.copy() for v in state.potentials])
    return readouts, trace


def rate_identity_check(trace: SpikeTrace, model: SnnModel, T: int) -> list[float]:
    """Per-layer max violation of the summed IF dynamics, normalised by threshold * T.

    Checks ``theta*sum(s) = sum(affine(input)) + sum(bias) + v[0] - v[T]``
    for every neuron, written in rate form via the affinity of each stage.
    """
    out = []
    for layer in model.layers:
        l = layer.index
        s = trace.spikes[l][:T]
        lhs = np.sum(s, axis=0) / T
        inp = trace.input if l == 0 else np.sum(trace.spikes[l - 1][:T], axis=0) / T
        rhs = layer.stage.affine(inp) + (trace.initial[l] - trace.residual[l]) / T
        bsum = np.zeros(layer.channels)
        for t in range(1, T + 1):
            b = model.bias_table.get(l, t)
            if b is not None:
                bsum += b
        rhs = rhs + _channel_view(bsum / T, rhs.ndim)
        theta = _channel_view(layer.threshold, lhs.ndim)
        out.append(float(np.max(np.abs(lhs - rhs) / theta)))
    return out
