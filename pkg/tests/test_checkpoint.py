import numpy as np
import pytest

from camloc.autodiff import ModelParams, Tensor
from camloc.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from camloc.errors import DataError, UsageError


def random_params(rng):
    values = {
        "W_a": Tensor(rng.normal(size=(4, 3))),
        "b_a": Tensor(rng.normal(size=4)),
        "nested.W": Tensor(rng.normal(size=(2, 2, 2))),
        "nested.b": Tensor(rng.normal(size=2)),
        "scalarish": Tensor(rng.normal(size=1)),
    }
    return ModelParams(values, bias_names={"b_a", "nested.b"})


class TestRoundTrip:
    def test_values_meta_and_bias_flags(self, tmp_path):
        rng = np.random.default_rng(0)
        params = random_params(rng)
        meta = {"head": "lstm", "step": 17, "config_hash": "f" * 64}
        save_checkpoint(tmp_path / "m.clck", params, meta)
        loaded, meta2 = load_checkpoint(tmp_path / "m.clck")
        assert meta2 == meta
        assert sorted(loaded.names()) == sorted(params.names())
        for name in params.names():
            assert np.array_equal(loaded[name].data, params[name].data)
            assert loaded.is_bias(name) == params.is_bias(name)

    def test_write_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        params = random_params(rng)
        save_checkpoint(tmp_path / "a.clck", params, {"step": 1})
        save_checkpoint(tmp_path / "b.clck", params, {"step": 1})
        assert (tmp_path / "a.clck").read_bytes() == (tmp_path / "b.clck").read_bytes()

    def test_load_save_fixpoint(self, tmp_path):
        rng = np.random.default_rng(2)
        save_checkpoint(tmp_path / "a.clck", random_params(rng), {"k": [1, 2]})
        params, meta = load_checkpoint(tmp_path / "a.clck")
        save_checkpoint(tmp_path / "b.clck", params, meta)
        assert (tmp_path / "a.clck").read_bytes() == (tmp_path / "b.clck").read_bytes()

    def test_digest_tracks_content(self, tmp_path):
        rng = np.random.default_rng(3)
        params = random_params(rng)
        save_checkpoint(tmp_path / "a.clck", params, {"step": 1})
        save_checkpoint(tmp_path / "b.clck", params, {"step": 2})
        assert checkpoint_digest(tmp_path / "a.clck") != checkpoint_digest(tmp_path / "b.clck")
        save_checkpoint(tmp_path / "c.clck", params, {"step": 1})
        assert checkpoint_digest(tmp_path / "a.clck") == checkpoint_digest(tmp_path / "c.clck")


class TestCorruption:
    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.clck").write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x.clck")

    def test_truncated_tensor_data(self, tmp_path):
        rng = np.random.default_rng(4)
        save_checkpoint(tmp_path / "x.clck", random_params(rng), {})
        blob = (tmp_path / "x.clck").read_bytes()
        (tmp_path / "cut.clck").write_bytes(blob[:-16])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "cut.clck")

    def test_trailing_garbage(self, tmp_path):
        rng = np.random.default_rng(5)
        save_checkpoint(tmp_path / "x.clck", random_params(rng), {})
        blob = (tmp_path / "x.clck").read_bytes()
        (tmp_path / "fat.clck").write_bytes(blob + b"extra")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "fat.clck")

    def test_corrupt_meta_json(self, tmp_path):
        rng = np.random.default_rng(6)
        save_checkpoint(tmp_path / "x.clck", random_params(rng), {"a": 1})
        blob = bytearray((tmp_path / "x.clck").read_bytes())
        # meta starts after magic(4) + version(4) + len(4)
        blob[12] = ord("{") ^ 0xFF
        (tmp_path / "bad.clck").write_bytes(bytes(blob))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.clck")

    def test_unserializable_meta(self, tmp_path):
        rng = np.random.default_rng(7)
        with pytest.raises(UsageError):
            save_checkpoint(tmp_path / "x.clck", random_params(rng),
                            {"arr": np.zeros(3)})
