"""Binary container round-trips and corruption handling."""

import numpy as np
import pytest

from seglora.checkpoint import CheckpointError, load_container, save_container


def test_roundtrip_tensors_and_text(tmp_path):
    path = tmp_path / "model.sl2l"
    tensors = {
        "a.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b.bias": np.array([1.5], dtype=np.float32),
        "deep": np.random.default_rng(0).normal(size=(2, 3, 2, 2)).astype(np.float32),
    }
    save_container(path, tensors, texts={"lora_config": '{"rank": 8}'})
    loaded, texts = load_container(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert np.array_equal(loaded[k], tensors[k])
    assert texts == {"lora_config": '{"rank": 8}'}


def test_deterministic_bytes(tmp_path):
    t = {"x": np.ones((2, 2), dtype=np.float32), "y": np.zeros(3, dtype=np.float32)}
    p1, p2 = tmp_path / "a.sl2l", tmp_path / "b.sl2l"
    save_container(p1, t, texts={"h": "v"})
    save_container(p2, t, texts={"h": "v"})
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_bytes_and_version(tmp_path):
    path = tmp_path / "m.sl2l"
    save_container(path, {"x": np.zeros(2, dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"SL2L"
    assert int.from_bytes(raw[4:8], "little") == 1

    bad = tmp_path / "bad.sl2l"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_container(bad)

    wrong_version = tmp_path / "v9.sl2l"
    wrong_version.write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_container(wrong_version)


def test_truncated_container(tmp_path):
    path = tmp_path / "m.sl2l"
    save_container(path, {"x": np.ones(64, dtype=np.float32)})
    cut = tmp_path / "cut.sl2l"
    cut.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_container(cut)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.sl2l"
    save_container(path, {"x": np.ones(2, dtype=np.float32)})
    extra = tmp_path / "extra.sl2l"
    extra.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_container(extra)


def test_float64_input_stored_as_f32(tmp_path):
    path = tmp_path / "m.sl2l"
    save_container(path, {"x": np.array([1.0, 2.0])})  # float64 in
    loaded, _ = load_container(path)
    assert loaded["x"].dtype == np.float32


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_container(tmp_path / "m.sl2l", {"x": np.zeros(1, dtype=np.float32)},
                       texts={"x": "clash"})
