"""Feedforward ANNs: layer specs, inference, batchnorm folding and desk-scale training.

A model is an ordered list of :class:`LayerSpec`. For conversion it is viewed
as a sequence of *stages*: every run of affine layers (linear, conv2d,
avgpool, batchnorm) closed by an activation is one spiking-equivalent stage,
and the trailing affine run ending in a linear layer is the readout. Stage
indices (0-based) are shared by the ANN activation capture and the SNN.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, StructureError, TrainingError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "trelu", "stairs")
LAYER_KINDS = ("linear", "conv2d", "avgpool", "batchnorm", "activation")


@dataclass
class ActivationSpec:
    name: str = "relu"
    a: float = 1.0  # trelu cap
    l: int = 1  # stairs step count
    # Per-channel output scale left behind by weight scaling: act(x*s)/s.
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.name not in ACTIVATIONS:
            raise StructureError(f"unknown activation {self.name!r}")
        if self.name == "trelu" and not self.a > 0:
            raise StructureError(f"trelu cap must be positive, got {self.a}")
        if self.name == "stairs" and (int(self.l) != self.l or self.l < 1):
            raise StructureError(f"stairs step count must be an integer >= 1, got {self.l}")


def _raw_activation(spec: ActivationSpec, x: np.ndarray) -> np.ndarray:
    if spec.name == "relu":
        return np.maximum(x, 0.0)
    if spec.name == "trelu":
        return np.minimum(np.maximum(x, 0.0), spec.a)
    y = np.clip(x, 0.0, 1.0)
    return np.floor(y * spec.l + 0.5) / spec.l


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def activation_apply(spec: ActivationSpec, x: np.ndarray) -> np.ndarray:
    """Elementwise activation. With ``spec.scale`` set, ``x`` must carry batch and channel axes."""
    x = np.asarray(x, dtype=tc.DTYPE)
    if spec.scale is None:
        return _raw_activation(spec, x)
    s = _channel_view(spec.scale, x.ndim)
    return _raw_activation(spec, x * s) / s


@dataclass
class LayerSpec:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    pool: int = 2
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    eps: float = 1e-5
    activation: ActivationSpec | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructureError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear" and (self.weight is None or self.weight.ndim != 2):
            raise StructureError("linear layer needs a 2-D weight (out x in)")
        if self.kind == "conv2d" and (self.weight is None or self.weight.ndim != 4):
            raise StructureError("conv2d layer needs a 4-D weight (C_out x C_in x kh x kw)")
        if self.kind in ("linear", "conv2d") and self.bias is not None:
            if self.bias.shape != (self.weight.shape[0],):
                raise StructureError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        if self.kind == "batchnorm":
            arrs = (self.gamma, self.beta, self.mean, self.var)
            if any(a is None for a in arrs) or len({a.shape for a in arrs}) != 1:
                raise StructureError("batchnorm needs gamma, beta, mean, var of equal length")
        if self.kind == "activation" and self.activation is None:
            raise StructureError("activation layer needs an ActivationSpec")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode forward on a batch (leading axis is the batch)."""
        if self.kind == "linear":
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            if x.shape[1] != self.weight.shape[1]:
                raise DimensionError(f"linear expects {self.weight.shape[1]} inputs, got {x.shape[1]}")
            out = x @ self.weight.T
            return out + self.bias if self.bias is not None else out
        if self.kind == "conv2d":
            if x.ndim != 4:
                raise DimensionError(f"conv2d expects B x C x H x W input, got {x.shape}")
            return tc.conv2d(x, self.weight, self.stride, self.pad, self.bias)
        if self.kind == "avgpool":
            return tc.avgpool2d(x, self.pool)
        if self.kind == "batchnorm":
            k = self.gamma / np.sqrt(self.var + self.eps)
            return (x - _channel_view(self.mean, x.ndim)) * _channel_view(k, x.ndim) + _channel_view(
                self.beta, x.ndim
            )
        return activation_apply(self.activation, x)

    @property
    def is_affine(self) -> bool:
        return self.kind != "activation"


def linear(weight, bias=None) -> LayerSpec:
    w = tc.tensor(weight)
    return LayerSpec("linear", weight=w, bias=None if bias is None else tc.tensor(bias))


def conv2d(weight, bias=None, stride=1, pad=0) -> LayerSpec:
    w = tc.tensor(weight)
    return LayerSpec("conv2d", weight=w, bias=None if bias is None else tc.tensor(bias), stride=stride, pad=pad)


def avgpool(size=2) -> LayerSpec:
    return LayerSpec("avgpool", pool=size)


def batchnorm(gamma, beta, mean, var, eps=1e-5) -> LayerSpec:
    return LayerSpec(
        "batchnorm",
        gamma=tc.tensor(gamma),
        beta=tc.tensor(beta),
        mean=tc.tensor(mean),
        var=tc.tensor(var),
        eps=eps,
    )


def activation(name="relu", a=1.0, l=1) -> LayerSpec:
    return LayerSpec("activation", activation=ActivationSpec(name, a, l))


@dataclass
class Stage:
    """A run of affine layers, optionally closed by an activation."""

    index: int
    ops: list[LayerSpec]
    act: ActivationSpec | None = None

    def affine(self, x: np.ndarray) -> np.ndarray:
        for op in self.ops:
            x = op.forward(x)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = self.affine(x)
        return z if self.act is None else activation_apply(self.act, z)


@dataclass
class AnnModel:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    train_accuracy: float | None = None
    _stages: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers or self.layers[-1].kind != "linear":
            raise StructureError("the final layer must be a linear readout")
        spiking, readout = self._split()
        self._stages = (spiking, readout)
        shapes = []
        x = np.zeros((1,) + self.input_shape)
        try:
            for st in spiking:
                x = st.forward(x)
                shapes.append(x.shape[1:])
            x = readout.forward(x)
        except DimensionError as exc:
            raise StructureError(f"layer shapes do not compose: {exc}") from exc
        self.stage_shapes = shapes
        self.num_classes = x.shape[1]

    def _split(self):
        stages, ops = [], []
        for layer in self.layers:
            if layer.kind == "activation":
                if not any(op.kind in ("linear", "conv2d") for op in ops):
                    raise StructureError("each activation must follow a linear or conv2d layer")
                stages.append(Stage(len(stages), ops, layer.activation))
                ops = []
            else:
                ops.append(layer)
        return stages, Stage(len(stages), ops, None)

    @property
    def spiking_stages(self) -> list[Stage]:
        return self._stages[0]

    @property
    def readout(self) -> Stage:
        return self._stages[1]

    def channel_counts(self) -> list[int]:
        return [s[0] for s in self.stage_shapes]

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return forward_collect(self, batch)[0]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(batch), axis=1)


def _check_batch(model: AnnModel, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=tc.DTYPE)
    if batch.shape[1:] != model.input_shape:
        raise DimensionError(f"batch shape {batch.shape} does not match input shape {model.input_shape}")
    return batch


def forward_collect(model: AnnModel, batch) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Logits plus the post-activation output of every spiking-equivalent stage."""
    x = _check_batch(model, batch)
    acts = {}
    for st in model.spiking_stages:
        x = st.forward(x)
        acts[st.index] = x
    return model.readout.forward(x), acts


def fold_batchnorm(model: AnnModel) -> AnnModel:
    """Absorb every batchnorm into the linear/conv layer right before it."""
    out: list[LayerSpec] = []
    for layer in model.layers:
        if layer.kind != "batchnorm":
            out.append(layer)
            continue
        prev = out[-1] if out else None
        if prev is None or prev.kind not in ("linear", "conv2d"):
            raise StructureError("batchnorm must immediately follow a linear or conv2d layer")
        k = layer.gamma / np.sqrt(layer.var + layer.eps)
        if prev.weight.shape[0] != k.shape[0]:
            raise StructureError("batchnorm channel count does not match the preceding layer")
        w = prev.weight * k.reshape((-1,) + (1,) * (prev.weight.ndim - 1))
        b = prev.bias if prev.bias is not None else np.zeros(prev.weight.shape[0])
        out[-1] = replace(prev, weight=w, bias=k * (b - layer.mean) + layer.beta)
    return AnnModel(out, model.input_shape, model.train_accuracy)


# ---------------------------------------------------------------------------
# model builders

def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_mlp(input_dim: int, hidden: Sequence[int], classes: int, seed: int = 0, act: str = "relu") -> AnnModel:
    rng = np.random.default_rng(seed)
    layers, n = [], input_dim
    for h in hidden:
        layers += [linear(_he(rng, (h, n), n), np.zeros(h)), activation(act)]
        n = h
    layers.append(linear(_he(rng, (classes, n), n) * 0.5, np.zeros(classes)))
    return AnnModel(layers, (input_dim,))


def build_cnn(
    input_shape=(1, 8, 8),
    channels: Sequence[int] = (8, 16, 32),
    pools: Sequence[bool] = (False, True, True),
    classes: int = 10,
    seed: int = 0,
    use_batchnorm: bool = True,
    act: str = "relu",
) -> AnnModel:
    """conv3x3 [-> batchnorm] -> act [-> avgpool2] blocks followed by a linear readout."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for cout, pool in zip(channels, pools):
        layers.append(conv2d(_he(rng, (cout, c, 3, 3), c * 9), np.zeros(cout), 1, 1))
        if use_batchnorm:
            layers.append(batchnorm(np.ones(cout), np.zeros(cout), np.zeros(cout), np.ones(cout)))
        layers.append(activation(act))
        if pool:
            layers.append(avgpool(2))
            h, w = h // 2, w // 2
        c = cout
    n = c * h * w
    layers.append(linear(_he(rng, (classes, n), n) * 0.5, np.zeros(classes)))
    return AnnModel(layers, input_shape)


# ---------------------------------------------------------------------------
# training (the only place that differentiates)

def _train_forward(layer: LayerSpec, x: np.ndarray, cache: list, momentum: float):
    if layer.kind == "batchnorm":
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (x - _channel_view(mu, x.ndim)) * _channel_view(inv, x.ndim)
        cache.append((xhat, inv, axes))
        n = x.size // x.shape[1]
        layer.mean[...] = (1 - momentum) * layer.mean + momentum * mu
        layer.var[...] = (1 - momentum) * layer.var + momentum * var * n / max(n - 1, 1)
        return xhat * _channel_view(layer.gamma, x.ndim) + _channel_view(layer.beta, x.ndim)
    if layer.kind == "conv2d":
        cols = tc.im2col(x, layer.weight.shape[2], layer.weight.shape[3], layer.stride, layer.pad)
        cache.append((x.shape, cols))
        out = cols @ layer.weight.reshape(layer.weight.shape[0], -1).T
        if layer.bias is not None:
            out = out + layer.bias
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    cache.append(x)
    return layer.forward(x)


def _col2im(dcols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    d = dcols.reshape(b, ho, wo, c, kh, kw)
    dx = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return dx[:, :, pad : pad + h, pad : pad + w]


def _train_backward(layer: LayerSpec, g: np.ndarray, cache, grads: dict):
    if layer.kind == "linear":
        x = cache
        xf = x.reshape(x.shape[0], -1)
        grads["weight"] = g.T @ xf
        if layer.bias is not None:
            grads["bias"] = g.sum(axis=0)
        return (g @ layer.weight).reshape(x.shape)
    if layer.kind == "conv2d":
        x_shape, cols = cache
        co = layer.weight.shape[0]
        gm = g.transpose(0, 2, 3, 1)  # B, H', W', C_out
        grads["weight"] = (gm.reshape(-1, co).T @ cols.reshape(-1, cols.shape[-1])).reshape(layer.weight.shape)
        if layer.bias is not None:
            grads["bias"] = gm.reshape(-1, co).sum(axis=0)
        dcols = gm @ layer.weight.reshape(co, -1)
        kh, kw = layer.weight.shape[2:]
        return _col2im(dcols, x_shape, kh, kw, layer.stride, layer.pad)
    if layer.kind == "avgpool":
        p = layer.pool
        return np.repeat(np.repeat(g, p, axis=-2), p, axis=-1) / (p * p)
    if layer.kind == "batchnorm":
        xhat, inv, axes = cache
        nd = g.ndim
        grads["gamma"] = (g * xhat).sum(axis=axes)
        grads["beta"] = g.sum(axis=axes)
        gx = g * _channel_view(layer.gamma, nd)
        n = g.size // g.shape[1]
        m1 = _channel_view(gx.mean(axis=axes), nd)
        m2 = _channel_view((gx * xhat).mean(axis=axes), nd)
        return (gx - m1 - xhat * m2) * _channel_view(inv, nd)
    # activation: straight-through inside the unclipped range
    x = cache
    spec = layer.activation
    if spec.name == "relu":
        mask = x > 0
    elif spec.name == "trelu":
        mask = (x > 0) & (x < spec.a)
    else:
        mask = (x > 0) & (x < 1)
    return g * mask


_TRAINABLE = {"linear": ("weight", "bias"), "conv2d": ("weight", "bias"), "batchnorm": ("gamma", "beta")}


def _copy_layer(layer: LayerSpec) -> LayerSpec:
    kw = {}
    for name in ("weight", "bias", "gamma", "beta", "mean", "var"):
        v = getattr(layer, name)
        kw[name] = None if v is None else v.copy()
    return replace(layer, **kw)


def train_sgd(
    model: AnnModel,
    data,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    bn_momentum: float = 0.1,
) -> AnnModel:
    """Softmax cross-entropy training with SGD + momentum; returns a new model.

    Deterministic for a given ``seed``. The returned model carries its final
    training accuracy in ``train_accuracy``.
    """
    layers = [_copy_layer(l) for l in model.layers]
    x_all = _check_batch(model, data.inputs)
    y_all = np.asarray(data.labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    velocity = {(i, n): 0.0 for i, l in enumerate(layers) for n in _TRAINABLE.get(l.kind, ()) if getattr(l, n) is not None}
    n = len(y_all)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y = x_all[idx], y_all[idx]
            caches = []
            for layer in layers:
                c: list = []
                x = _train_forward(layer, x, c, bn_momentum)
                caches.append(c[0])
            z = x - x.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -logp[np.arange(len(y)), y].mean()
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}, batch offset {start} (lr={lr})")
            total += loss * len(y)
            g = np.exp(logp)
            g[np.arange(len(y)), y] -= 1.0
            g /= len(y)
            for i in range(len(layers) - 1, -1, -1):
                grads: dict = {}
                g = _train_backward(layers[i], g, caches[i], grads)
                for name, gv in grads.items():
                    p = getattr(layers[i], name)
                    if weight_decay and name == "weight":
                        gv = gv + weight_decay * p
                    v = momentum * velocity[(i, name)] + gv
                    velocity[(i, name)] = v
                    p -= lr * v
        log.info("epoch %d loss %.4f", epoch, total / n)
    trained = AnnModel(layers, model.input_shape)
    trained.train_accuracy = float(np.mean(trained.predict(x_all) == y_all))
    log.info("training accuracy %.4f", trained.train_accuracy)
    return trained
