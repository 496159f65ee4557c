import numpy as np
import pytest

from convmpn import checkpoint
from convmpn.checkpoint import CheckpointError
from convmpn.model import ModelConfig, build_model


def test_save_load_save_is_bitwise_identical(tmp_path):
    cfg = ModelConfig.desk(seed=4)
    state = build_model(cfg).state_dict()
    checkpoint.save(tmp_path / "a.cmpn", state, cfg.digest())
    loaded = checkpoint.load(tmp_path / "a.cmpn", cfg.digest())
    checkpoint.save(tmp_path / "b.cmpn", loaded, cfg.digest())
    assert (tmp_path / "a.cmpn").read_bytes() == (tmp_path / "b.cmpn").read_bytes()
    assert list(loaded) == list(state)
    for k, v in state.items():
        assert loaded[k].tobytes() == v.tobytes()


def test_loaded_weights_reproduce_outputs(tmp_path):
    cfg = ModelConfig.desk(seed=4)
    a = build_model(cfg)
    checkpoint.save(tmp_path / "m.cmpn", a.state_dict(), cfg.digest())
    b = build_model(ModelConfig.desk(seed=9))
    b.load_state_dict(checkpoint.load(tmp_path / "m.cmpn", cfg.digest()))
    img = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
    corners = [(10, 10), (50, 12), (30, 50)]
    assert a.eval()(img, corners).data.tobytes() == b.eval()(img, corners).data.tobytes()


def test_config_hash_mismatch_is_rejected(tmp_path):
    cfg = ModelConfig.desk()
    checkpoint.save(tmp_path / "m.cmpn", build_model(cfg).state_dict(), cfg.digest())
    with pytest.raises(CheckpointError, match="mismatch"):
        checkpoint.load(tmp_path / "m.cmpn", ModelConfig.desk(t=2).digest())
    checkpoint.save(tmp_path / "bare.cmpn", {"w": np.ones(2)})
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "bare.cmpn", cfg.digest())
    assert checkpoint.load(tmp_path / "bare.cmpn")["w"].tolist() == [1.0, 1.0]


def test_corrupt_files_are_rejected():
    blob = checkpoint.encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, "abc")
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-4])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-26])
    state, digest = checkpoint.decode(blob)
    assert digest == "abc" and state["w"].shape == (2, 3)


def test_scalar_and_empty_arrays():
    state = {"s": np.float32(2.5), "e": np.zeros((0, 3), np.float32)}
    back, _ = checkpoint.decode(checkpoint.encode(state))
    assert back["s"].shape == () and back["s"] == 2.5
    assert back["e"].shape == (0, 3)
