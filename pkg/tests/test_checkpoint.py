import numpy as np
import pytest

from ecdkit.errors import CheckpointError
from ecdkit.model import (ModelConfig, init_model, load_checkpoint,
                          parameter_schema, save_checkpoint)


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_ckpt, tiny_mc):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.config == tiny_mc
    for name, _ in parameter_schema(tiny_mc):
        assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.params[name], tiny_ckpt.params[name])


def test_checkpoint_meta_survives(tmp_path, tiny_mc):
    cp = init_model(tiny_mc)
    cp.meta["train"] = {"epochs": 3}
    path = tmp_path / "m.ckpt"
    save_checkpoint(cp, path)
    assert load_checkpoint(path).meta.get("train") == {"epochs": 3}


def test_checkpoint_truncation_names_tensor(tmp_path, tiny_ckpt):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="head_w"):
        load_checkpoint(path)


def test_checkpoint_missing_tensor_detected(tmp_path):
    mc = ModelConfig(vocab_size=8, n_layers=1, n_heads=1, d_model=4, d_ff=4,
                     max_seq_len=16, n_visual_tokens=2, seed=0)
    cp = init_model(mc)
    del cp.params["ln_f_g"]
    with pytest.raises(CheckpointError, match="ln_f_g"):
        save_checkpoint(cp, tmp_path / "m.ckpt")


def test_checkpoint_same_bytes_for_same_model(tmp_path, tiny_mc):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(init_model(tiny_mc), a)
    save_checkpoint(init_model(tiny_mc), b)
    assert a.read_bytes() == b.read_bytes()


def test_load_rejects_nonexistent(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
