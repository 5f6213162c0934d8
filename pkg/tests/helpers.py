import numpy as np

from snncal import ann
from snncal.snn_sim import BiasTable, SnnModel


def single_neuron(theta=1.0, weight=1.0, initial="zero"):
    """One-input, one-neuron spiking layer with an identity readout."""
    m = ann.AnnModel([ann.linear([[weight]], [0.0]), ann.activation("relu"), ann.linear([[1.0]], [0.0])], (1,))
    return SnnModel(m, [np.array([theta])], initial)


def with_constant_bias(snn, values, horizon):
    table = BiasTable.zeros(snn.ann.channel_counts(), horizon)
    for l, v in enumerate(values):
        table.set_layer(l, v)
    return snn.with_bias(table)


def random_cnn_snn(seed, thresholds=None):
    r = np.random.default_rng(seed)
    m = ann.build_cnn((1, 4, 4), (3, 4), (False, True), 3, seed=seed, use_batchnorm=False)
    for l in m.layers:
        if l.bias is not None:
            l.bias[...] = r.normal(0, 0.1, l.bias.shape)
    if thresholds is None:
        thresholds = [r.uniform(0.5, 2.0, c) for c in m.channel_counts()]
    return SnnModel(m, thresholds)
