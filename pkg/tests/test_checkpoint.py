"""Checkpoint container: byte-identical round trips, canonical naming,
error handling, and the aux-presence contract."""

import numpy as np
import pytest

from moma.checkpoint import Checkpoint, config_diff
from moma.errors import CheckpointError


def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        manifest={
            "run_config": {"model": {"layers": 2}, "seed": 7},
            "step": 42,
            "data_cursor": 42,
            "optimizer_step": 42,
            "gumbel_rng_state": {"bit_generator": "PCG64", "state": {"state": 2**100}},
        },
        tensors={
            "embed.tokens": rng.standard_normal((8, 4)).astype(np.float32),
            "layer.0.attn.wq": rng.standard_normal((4, 4)).astype(np.float32),
            "opt.m.embed.tokens": rng.standard_normal((8, 4)).astype(np.float32),
            "f64.tensor": rng.standard_normal(5),
        },
    )


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        ck = sample_checkpoint()
        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        ck.save(p1)
        loaded = Checkpoint.load(p1)
        loaded.save(p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_values_and_manifest_preserved(self, tmp_path):
        ck = sample_checkpoint()
        path = str(tmp_path / "c.bin")
        ck.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.step == 42
        assert loaded.manifest["gumbel_rng_state"]["state"]["state"] == 2**100
        for name, arr in ck.tensors.items():
            assert np.array_equal(loaded.tensors[name], arr)
            assert loaded.tensors[name].dtype == arr.dtype

    def test_aux_detection_and_filtering(self, tmp_path):
        ck = sample_checkpoint()
        assert not ck.has_aux
        ck.tensors["aux.layer.0.mod.w1"] = np.zeros((4, 2), dtype=np.float32)
        assert ck.has_aux
        model_only = ck.model_tensors()
        assert "embed.tokens" in model_only
        assert not any(n.startswith(("opt.", "aux.")) for n in model_only)


class TestErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"GARBAGE!" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.load(str(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(str(tmp_path / "nope.bin"))

    def test_truncated_file(self, tmp_path):
        ck = sample_checkpoint()
        path = str(tmp_path / "t.bin")
        ck.save(path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(Exception):
            Checkpoint.load(path)


class TestConfigDiff:
    def test_lists_each_difference(self):
        a = {"model": {"layers": 2, "heads": 4}, "seed": 1}
        b = {"model": {"layers": 3, "heads": 4}, "seed": 2}
        diff = config_diff(a, b)
        assert any("model.layers" in d for d in diff)
        assert any("seed" in d for d in diff)
        assert len(diff) == 2

    def test_equal_configs_empty(self):
        a = {"model": {"layers": 2}}
        assert config_diff(a, dict(a)) == []
