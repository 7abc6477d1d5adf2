import struct

import numpy as np
import pytest

from mpcn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mpcn.errors import (ArchitectureMismatchError, CorruptCheckpointError,
                         UnsupportedVersionError)
from mpcn.network import (ConvSpec, Network, NetworkSpec, PathSpec, PoolSpec,
                          build_paper_architecture)


def small_spec(n_paths=2):
    path = (ConvSpec(2, 3), PoolSpec(3, 2))
    paths = tuple(PathSpec(path, t) for t in ("source", "bilateral")[:n_paths])
    return NetworkSpec(paths=paths, n_classes=3, crop=8)


def make_checkpoint(n_paths=2, epoch=4):
    net = Network(small_spec(n_paths), seed=9)
    params = net.params()
    velocity = {n: np.full_like(a, 0.125) for n, a in params.items()}
    means = {"source": np.full((8, 8, 3), 3.5, dtype=np.float32)}
    if n_paths == 2:
        means["bilateral"] = np.full((8, 8, 3), 2.25, dtype=np.float32)
    metrics = [[1, 10, "train", 1.0986, 0.66, 0.0],
               [1, 10, "val", 1.2, 0.7, 0.1]]
    return Checkpoint(spec=net.spec, params=params, velocity=velocity,
                      sgd={"learning_rate": 0.01, "momentum": 0.9,
                           "weight_decay": 5e-4},
                      epoch=epoch, seed=9, metrics=metrics, means=means)


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        ckpt = make_checkpoint()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_all_fields_survive(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.spec == ckpt.spec
        assert loaded.epoch == 4 and loaded.seed == 9
        assert loaded.sgd == {"learning_rate": 0.01, "momentum": 0.9,
                              "weight_decay": 5e-4}
        assert loaded.metrics == ckpt.metrics
        assert set(loaded.params) == set(ckpt.params)
        for name in ckpt.params:
            np.testing.assert_array_equal(loaded.params[name], ckpt.params[name])
            np.testing.assert_array_equal(loaded.velocity[name], ckpt.velocity[name])
        np.testing.assert_array_equal(loaded.means["bilateral"],
                                      ckpt.means["bilateral"])

    def test_restored_network_predicts_identically(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "d.ckpt"
        save_checkpoint(ckpt, path)
        rng = np.random.default_rng(0)
        src = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        fil = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        original = Network(ckpt.spec, seed=9)
        original.set_params(ckpt.params)
        restored = Network(ckpt.spec, seed=1234)  # different init, then overwritten
        restored.set_params(load_checkpoint(path).params)
        p1, _ = original.forward(src, fil, mode="infer")
        p2, _ = restored.forward(src, fil, mode="infer")
        np.testing.assert_array_equal(p1, p2)

    def test_no_leftover_temp_file(self, tmp_path):
        path = tmp_path / "e.ckpt"
        save_checkpoint(make_checkpoint(), path)
        assert not (tmp_path / "e.ckpt.tmp").exists()
        assert sorted(p.name for p in tmp_path.iterdir()) == ["e.ckpt"]


class TestArchitectureGuard:
    def test_two_path_into_one_path_spec_raises(self, tmp_path):
        path = tmp_path / "two.ckpt"
        save_checkpoint(make_checkpoint(n_paths=2), path)
        with pytest.raises(ArchitectureMismatchError):
            load_checkpoint(path, expect_spec=small_spec(n_paths=1))

    def test_matching_spec_accepted(self, tmp_path):
        path = tmp_path / "ok.ckpt"
        save_checkpoint(make_checkpoint(n_paths=2), path)
        loaded = load_checkpoint(path, expect_spec=small_spec(n_paths=2))
        assert loaded.spec == small_spec(n_paths=2)

    def test_paper_spec_survives(self, tmp_path):
        spec = build_paper_architecture(100, 2, 224)
        # header-only round trip: params omitted to keep this fast
        ckpt = Checkpoint(spec=spec, params={}, seed=1)
        path = tmp_path / "paper.ckpt"
        save_checkpoint(ckpt, path)
        assert load_checkpoint(path).spec == spec


class TestCorruptionHandling:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(make_checkpoint(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"JUNK"
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_future_version(self, tmp_path):
        path = tmp_path / "y.ckpt"
        save_checkpoint(make_checkpoint(), path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    @pytest.mark.parametrize("cut", [6, 50, -20, -1])
    def test_truncation(self, tmp_path, cut):
        path = tmp_path / "z.ckpt"
        save_checkpoint(make_checkpoint(), path)
        data = path.read_bytes()
        path.write_bytes(data[:cut] if cut > 0 else data[:len(data) + cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "w.ckpt"
        save_checkpoint(make_checkpoint(), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
