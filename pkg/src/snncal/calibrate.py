"""Forward-only temporal bias calibration.

``ftbc_calibrate`` walks the spiking layers in order. For each layer it
streams calibration batches through the already-calibrated earlier layers
and, timestep by timestep, nudges the layer's per-channel bias toward the
value that makes the mean spike output equal the mean ANN activation. The
same correction is added to the live membrane potential so later timesteps
of the same batch see it straight away. No gradients are involved.

``avg_bias_calibrate`` is the time-independent baseline that matches the
mean firing rate over the whole horizon instead of every timestep.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .ann import AnnModel, Stage, _channel_view, forward_collect
from .errors import CalibrationError, ConfigError, DimensionError
from .snn_sim import BiasTable, SnnModel, SnnState, SpikingLayer, init_state, spike_layer_forward

log = logging.getLogger(__name__)

SIGNS = ("target_minus_observed", "observed_minus_target")


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: float = 0.5
    iterations: int = 10
    batch_size: int = 32
    batches_per_iter: int = 2
    T: int = 32
    seed: int = 0
    # "observed_minus_target" reproduces the literal pseudocode sign, for ablation only
    sign: str = "target_minus_observed"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        for name in ("iterations", "batch_size", "batches_per_iter", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sign not in SIGNS:
            raise ConfigError(f"sign must be one of {SIGNS}")

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown calibration fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrajectoryRow:
    iteration: int
    t: int
    accuracy: float | None
    layer: int
    gap_norm: float


@dataclass
class CalibrationTrajectory:
    rows: list[TrajectoryRow] = field(default_factory=list)

    def accuracy_matrix(self) -> tuple[list[int], np.ndarray]:
        """(iterations, accuracy[iteration, t-1]) from rows that carry accuracy."""
        its = sorted({r.iteration for r in self.rows if r.accuracy is not None})
        if not its:
            return [], np.zeros((0, 0))
        T = max(r.t for r in self.rows)
        m = np.full((len(its), T), np.nan)
        pos = {it: i for i, it in enumerate(its)}
        for r in self.rows:
            if r.accuracy is not None:
                m[pos[r.iteration], r.t - 1] = r.accuracy
        return its, m


def _sequential_batches(n: int, batch_size: int, seed: int):
    """Endless seed-shuffled sequential passes; the same order is reused every pass."""
    order = np.random.default_rng(seed).permutation(n)
    pos = 0
    while True:
        idx = np.take(order, np.arange(pos, pos + min(batch_size, n)), mode="wrap")
        pos = (pos + len(idx)) % n
        yield idx


def bias_corr_step(
    ann_layer: Stage,
    snn_layer: SpikingLayer,
    t: int,
    ann_input: np.ndarray,
    snn_input_spikes: np.ndarray,
    snn_state: SnnState,
    bias: np.ndarray | None = None,
    sign: str = "target_minus_observed",
) -> tuple[np.ndarray, np.ndarray]:
    """One timestep of one layer: returns (channel correction, emitted spikes).

    The correction is ``channel_mean(a - s(t))`` where ``a`` is the ANN stage
    output on ``ann_input`` and ``s(t)`` the layer's spikes at ``t`` (the
    state is advanced).
    """
    a = ann_layer.forward(ann_input)
    s = spike_layer_forward(snn_layer, snn_state, snn_input_spikes, bias)
    if a.shape != s.shape:
        raise DimensionError(f"ANN output {a.shape} and SNN output {s.shape} differ at t={t}")
    corr = tc.channel_mean(a - s)
    if sign == "observed_minus_target":
        corr = -corr
    return corr, s


def _prefix_spikes(snn: SnnModel, state: SnnState, x: np.ndarray, upto: int, t: int) -> np.ndarray:
    inp = x
    for layer in snn.layers[:upto]:
        inp = spike_layer_forward(layer, state, inp, snn.bias_table.get(layer.index, t))
    return inp


def _check_pair(ann: AnnModel, snn: SnnModel, data):
    if ann.channel_counts() != snn.ann.channel_counts():
        raise DimensionError("ANN and SNN do not share layer indexing")
    if len(data.inputs) == 0:
        raise ValueError("calibration data is empty")


def ftbc_calibrate(
    ann: AnnModel,
    snn: SnnModel,
    data,
    cfg: CalibrationConfig,
    validation=None,
    eval_timesteps=None,
) -> tuple[SnnModel, CalibrationTrajectory]:
    """Calibrate a per-(layer, timestep, channel) bias table in forward passes only.

    ``ann`` must compute the same function as ``snn.ann`` (after any weight
    scaling), since its activations are the targets. With ``validation``,
    per-timestep accuracy is recorded after every iteration. Iterations are
    numbered globally across layers (layer l owns iterations
    ``l*cfg.iterations .. (l+1)*cfg.iterations - 1``).
    """
    from .harness import evaluate  # harness depends on this module

    _check_pair(ann, snn, data)
    T = cfg.T
    table = BiasTable.zeros(snn.ann.channel_counts(), T)
    if snn.bias_table.horizon:
        for l in range(len(table.values)):
            h = min(T, snn.bias_table.horizon)
            table.values[l][:h] = snn.bias_table.values[l][:h]
    model = snn.with_bias(table)
    traj = CalibrationTrajectory()
    ts = list(eval_timesteps) if eval_timesteps else list(range(1, T + 1))
    x_all = np.asarray(data.inputs, dtype=np.float64)
    ann_stages = ann.spiking_stages
    it_global = 0
    for layer in model.layers:
        l = layer.index
        batches = _sequential_batches(len(x_all), cfg.batch_size, cfg.seed)
        for _ in range(cfg.iterations):
            gap_acc = np.zeros(T)
            for _ in range(cfg.batches_per_iter):
                x = x_all[next(batches)]
                _, acts = forward_collect(ann, x)
                ann_in = x if l == 0 else acts[l - 1]
                state = init_state(model, len(x))
                for t in range(1, T + 1):
                    s_in = _prefix_spikes(model, state, x, l, t)
                    corr, _ = bias_corr_step(
                        ann_stages[l], layer, t, ann_in, s_in, state, table.get(l, t), cfg.sign
                    )
                    if not np.all(np.isfinite(corr)):
                        raise CalibrationError(f"non-finite correction at layer {l}, t={t}")
                    gap_acc[t - 1] += np.mean(np.abs(corr)) / cfg.batches_per_iter
                    if cfg.alpha:
                        step = cfg.alpha * corr
                        table.add(l, t, step)
                        v = state.potentials[l]
                        state.potentials[l] = v + _channel_view(step, v.ndim)
            acc = None
            if validation is not None:
                acc = dict(zip(ts, evaluate(model, validation, ts)))
            for t in range(1, T + 1):
                traj.rows.append(
                    TrajectoryRow(it_global, t, None if acc is None else acc.get(t), l, float(gap_acc[t - 1]))
                )
            log.debug("layer %d iteration %d mean gap %.5f", l, it_global, gap_acc.mean())
            it_global += 1
    return model, traj


def avg_bias_calibrate(ann: AnnModel, snn: SnnModel, data, cfg: CalibrationConfig) -> SnnModel:
    """Time-independent baseline: one bias per channel from the horizon-mean rate gap."""
    _check_pair(ann, snn, data)
    T = cfg.T
    table = BiasTable.zeros(snn.ann.channel_counts(), T)
    model = snn.with_bias(table)
    x_all = np.asarray(data.inputs, dtype=np.float64)
    for layer in model.layers:
        l = layer.index
        b = np.zeros(layer.channels)
        batches = _sequential_batches(len(x_all), cfg.batch_size, cfg.seed)
        for _ in range(cfg.iterations * cfg.batches_per_iter):
            x = x_all[next(batches)]
            _, acts = forward_collect(ann, x)
            state = init_state(model, len(x))
            total = None
            for t in range(1, T + 1):
                s_in = _prefix_spikes(model, state, x, l, t)
                s = spike_layer_forward(layer, state, s_in, table.get(l, t))
                total = s if total is None else total + s
            corr = tc.channel_mean(acts[l] - total / T)
            if cfg.sign == "observed_minus_target":
                corr = -corr
            if not np.all(np.isfinite(corr)):
                raise CalibrationError(f"non-finite correction at layer {l}")
            if cfg.alpha:
                b = b + cfg.alpha * corr
                table.set_layer(l, b)
    return model


def solve_bias_star(
    samples,
    target: float,
    c: float = 0.5,
    iters: int = 200,
    batch_size: int = 4096,
    seed: int = 0,
) -> float:
    """Find b with mean H(x + b - 1) = target (H(0) = 1) by b <- b + c*(target - E).

    E is estimated on a fresh resampled batch every iteration, starting from b = 0.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("solve_bias_star needs samples")
    rng = np.random.default_rng(seed)
    b = 0.0
    for _ in range(iters):
        batch = x[rng.integers(0, x.size, size=batch_size)]
        e = float(np.mean(batch + b - 1.0 >= 0.0))
        b += c * (target - e)
    return b


def firing_expectation(samples, b: float) -> float:
    x = np.asarray(samples, dtype=np.float64)
    return float(np.mean(x + b - 1.0 >= 0.0))
