import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CORPUS, random_model
from kvshare.io import (BOS, InputError, LoadError, detokenize, load_calibration, load_sequences,
                        load_strategy, load_weights, read_container, save_strategy, save_weights,
                        tokenize_bytes, write_container)
from kvshare.kv_cache import SharingStrategy, StrategyError


def test_weights_round_trip_bitwise(tmp_path):
    m = random_model(seed=3)
    path = tmp_path / "m.bin"
    save_weights(path, m.config, m.weights)
    weights, config = load_weights(path)
    assert config == m.config
    for name, t in m.weights.to_tensors().items():
        assert np.array_equal(weights.to_tensors()[name], t), name


def test_truncated_body_names_tensor(tmp_path):
    m = random_model()
    path = tmp_path / "m.bin"
    save_weights(path, m.config, m.weights)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(LoadError, match="'output'"):
        load_weights(path)


def _raw_container(path, header, body):
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + body)


def test_overlapping_offsets_rejected(tmp_path):
    p = tmp_path / "x.bin"
    _raw_container(p, {"a": {"dtype": "f32", "shape": [2], "offset": 0, "length": 8},
                       "b": {"dtype": "f32", "shape": [2], "offset": 4, "length": 8}}, bytes(16))
    with pytest.raises(LoadError, match="overlap"):
        read_container(p)


def test_wrong_dtype_rejected(tmp_path):
    p = tmp_path / "x.bin"
    _raw_container(p, {"a": {"dtype": "f16", "shape": [2], "offset": 0, "length": 4}}, bytes(4))
    with pytest.raises(LoadError, match="'a'"):
        read_container(p)


def test_corrupt_header_rejected(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(struct.pack("<Q", 5) + b"{nope" + bytes(8))
    with pytest.raises(LoadError, match="corrupt header"):
        read_container(p)


def test_shape_mismatch_and_missing_tensor(tmp_path):
    m = random_model()
    path = tmp_path / "m.bin"
    tensors = m.weights.to_tensors()
    tensors["norm"] = np.ones(7, np.float32)
    del tensors["layers.2.wk"]
    write_container(path, tensors)
    path.with_suffix(".json").write_text(json.dumps(m.config.to_dict()))
    with pytest.raises(LoadError, match="layers.2.wk"):
        load_weights(path)
    tensors["layers.2.wk"] = m.weights.layers[2].wk
    write_container(path, tensors)
    with pytest.raises(LoadError, match="'norm'"):
        load_weights(path)


def test_missing_sidecar(tmp_path):
    m = random_model()
    write_container(tmp_path / "m.bin", m.weights.to_tensors())
    with pytest.raises(LoadError, match="sidecar"):
        load_weights(tmp_path / "m.bin")


def test_tokenize_examples():
    assert tokenize_bytes(b"") == [256]
    assert tokenize_bytes(b"AB") == [256, 65, 66]


@settings(max_examples=100)
@given(st.binary(max_size=64))
def test_tokenize_round_trip(data):
    assert detokenize(tokenize_bytes(data)) == data


def test_calibration_deterministic_and_defaults():
    a = load_calibration(CORPUS / "calib_a.txt", seed=3)
    b = load_calibration(CORPUS / "calib_a.txt", seed=3)
    assert a == b
    assert len(a) == 30 and a.row_len == 64
    assert all(row[0] == BOS for row in a)
    assert load_calibration(CORPUS / "calib_a.txt", seed=4) != a


def test_calibration_windows_do_not_overlap(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(bytes(range(256)))
    calib = load_calibration(p, rows=8, row_len=9, seed=0)
    starts = set()
    data = p.read_bytes()
    for row in calib:
        body = bytes(row[1:])
        start = data.find(body)
        assert start % 8 == 0
        starts.add(start)
    assert len(starts) == 8


def test_calibration_corpus_too_small(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"x" * 100)
    with pytest.raises(InputError):
        load_calibration(p, rows=30, row_len=64)
    with pytest.raises(InputError):
        load_sequences(p, 3, 64)


def test_strategy_file_round_trip(tmp_path):
    s = SharingStrategy([(7, 0), (6, 2)])
    doc = save_strategy(tmp_path / "s.json", s, model_hash="abc", n_layers=8, target=2, threshold=0.5,
                        ordering="dissimilar", seed=1, achieved_similarity=0.93)
    assert set(doc) >= {"model_hash", "L", "C", "T", "ordering", "seed", "pairs",
                        "fingerprint_combine", "achieved_similarity"}
    assert doc["fingerprint_combine"] == "mean"
    assert load_strategy(tmp_path / "s.json") == s
    with pytest.raises(StrategyError):
        load_strategy(tmp_path / "s.json", n_layers=6)
