import numpy as np
import pytest

from snncal import ann
from snncal.errors import FormatError
from snncal.formats import load_bias_table, load_model, load_snn, save_bias_table, save_model, save_snn
from snncal.snn_sim import BiasTable, simulate

from .helpers import random_cnn_snn


def _files(path):
    return path.read_bytes(), path.with_suffix(".bin").read_bytes()


def test_model_roundtrip_bytes(tmp_path):
    m = ann.build_cnn(seed=1, act="stairs")
    save_model(m, tmp_path / "a.json")
    m2 = load_model(tmp_path / "a.json")
    save_model(m2, tmp_path / "b.json")
    ja, ba = _files(tmp_path / "a.json")
    jb, bb = _files(tmp_path / "b.json")
    assert ba == bb
    assert ja.replace(b"a.bin", b"b.bin") == jb
    x = np.random.default_rng(0).random((4, 1, 8, 8))
    assert np.array_equal(m.forward(x), m2.forward(x))


def test_snn_and_bias_roundtrip(tmp_path):
    snn = random_cnn_snn(2)
    table = BiasTable.zeros(snn.ann.channel_counts(), 3)
    rng = np.random.default_rng(1)
    for l, c in enumerate(table.channel_counts):
        table.values[l][...] = rng.normal(size=(3, c))
    snn = snn.with_bias(table)
    save_snn(snn, tmp_path / "s.json", tmp_path / "bias.json")
    back = load_snn(tmp_path / "s.json")
    assert back.bias_table.equals(table)
    save_snn(back, tmp_path / "t.json", tmp_path / "bias2.json")
    assert _files(tmp_path / "bias.json")[1] == _files(tmp_path / "bias2.json")[1]
    assert _files(tmp_path / "s.json")[1] == _files(tmp_path / "t.json")[1]
    x = rng.random((3, 1, 4, 4))
    assert np.array_equal(simulate(snn, x, 6)[0], simulate(back, x, 6)[0])


def test_bias_table_bytes_stable(tmp_path):
    table = BiasTable.zeros([2, 3], 2)
    table.add(1, 2, np.array([0.1, -0.2, 0.3]))
    save_bias_table(table, tmp_path / "a.json")
    save_bias_table(load_bias_table(tmp_path / "a.json"), tmp_path / "b.json")
    assert _files(tmp_path / "a.json")[1] == _files(tmp_path / "b.json")[1]
    assert (tmp_path / "a.json").read_bytes().replace(b"a.bin", b"b.bin") == (tmp_path / "b.json").read_bytes()


def test_truncated_blob(tmp_path):
    save_model(ann.build_mlp(4, (3,), 2), tmp_path / "m.json")
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.json")


def test_kind_checks(tmp_path):
    snn = random_cnn_snn(3)
    save_snn(snn, tmp_path / "s.json")
    save_model(snn.ann, tmp_path / "m.json")
    with pytest.raises(FormatError):
        load_model(tmp_path / "s.json")
    with pytest.raises(FormatError):
        load_snn(tmp_path / "m.json")
    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_model(tmp_path / "junk.json")
