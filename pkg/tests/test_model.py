"""Classifier topology, deterministic init and the checkpoint format."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from qcnet import model as M
from qcnet.data import LABEL_TO_INDEX
from qcnet.tensor import ShapeMismatch


@pytest.fixture
def desk32():
    return M.preset_config("desk-32", seed=3)


class TestConfig:
    def test_desk32_preset(self):
        cfg = M.preset_config("desk-32")
        assert cfg.input_dims == (32, 32, 24)
        assert (cfg.growth_rate, cfg.stem_channels, cfg.compression) == (12, 24, 0.5)

    def test_paper96_preset(self):
        assert M.preset_config("paper-96").input_dims == (96, 96, 70)

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            M.preset_config("desk-64")

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(compression=0.0),
            dict(compression=1.5),
            dict(num_classes=1),
            dict(stem_stride=3),
            dict(growth_rate=0),
        ],
    )
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            M.ModelConfig(input_dims=(32, 32, 24), **kwargs)

    def test_json_round_trip(self, desk32):
        assert M.ModelConfig.from_json(desk32.to_json()) == desk32


class TestTraces:
    def test_channel_trace(self, desk32):
        # stem 24, +2 layers of growth 12 per block, halved at each transition
        assert M.channel_trace(desk32) == [24, 48, 24, 48, 24, 48]

    def test_spatial_trace_desk(self, desk32):
        assert M.spatial_trace(desk32) == [(12, 16, 16), (6, 8, 8), (3, 4, 4)]

    def test_spatial_trace_full(self):
        cfg = M.preset_config("paper-96")
        assert M.spatial_trace(cfg) == [(35, 48, 48), (17, 24, 24), (8, 12, 12)]

    def test_odd_compression_rounds_up(self):
        cfg = M.ModelConfig(input_dims=(32, 32, 24), stem_channels=25)
        # 25 + 24 = 49 channels, ceil(0.5 * 49) = 25
        assert M.channel_trace(cfg)[:3] == [25, 49, 25]

    def test_underflow_raises_at_build(self):
        cfg = M.ModelConfig(input_dims=(8, 8, 4))
        with pytest.raises(M.SpatialUnderflow):
            M.build_model(cfg)


class TestBuild:
    def test_param_count_pinned(self, desk32):
        assert M.build_model(desk32).param_count() == 62162

    def test_same_seed_identical_bits(self, desk32):
        a = M.build_model(desk32)
        b = M.build_model(desk32)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name].data, b.tensors[name].data), name

    def test_seed_changes_weights(self):
        a = M.build_model(M.preset_config("desk-32", seed=0))
        b = M.build_model(M.preset_config("desk-32", seed=1))
        assert not np.array_equal(
            a.tensors["stem.conv.weight"].data, b.tensors["stem.conv.weight"].data
        )

    def test_running_stats_not_learnable(self, desk32):
        m = M.build_model(desk32)
        learnable = {t.name for t in m.parameters()}
        assert "head.bn.gamma" in learnable
        assert "head.bn.running_mean" not in learnable
        assert not m.tensors["head.bn.running_var"].requires_grad

    def test_copy_is_independent(self, desk32):
        m = M.build_model(desk32)
        c = m.copy()
        c.tensors["head.fc.bias"].data[:] = 99.0
        assert m.tensors["head.fc.bias"].data[0] == 0.0
        assert c.tensors["head.fc.weight"].requires_grad


class TestForward:
    def test_output_is_probability_rows(self, desk32):
        m = M.build_model(desk32)
        x = np.random.default_rng(0).random((2, 1, 24, 32, 32), dtype=np.float32)
        out = m.forward(x, mode="eval")
        assert out.shape == (2, 2)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=1e-5)
        assert (out.data >= 0).all()

    def test_artifact_is_column_one(self):
        # the probability column read by the QC layer must match the label map
        assert LABEL_TO_INDEX["artifact"] == 1
        assert LABEL_TO_INDEX["normal"] == 0

    def test_wrong_shape_rejected(self, desk32):
        m = M.build_model(desk32)
        with pytest.raises(ShapeMismatch):
            m.forward(np.zeros((2, 1, 32, 32, 24), dtype=np.float32))

    def test_eval_leaves_running_stats(self, desk32):
        m = M.build_model(desk32)
        before = m.tensors["stem.conv.weight"].data.copy()
        rm_before = m.tensors["head.bn.running_mean"].data.copy()
        x = np.random.default_rng(1).random((1, 1, 24, 32, 32), dtype=np.float32)
        m.forward(x, mode="eval")
        np.testing.assert_array_equal(m.tensors["head.bn.running_mean"].data, rm_before)
        np.testing.assert_array_equal(m.tensors["stem.conv.weight"].data, before)

    def test_train_updates_running_stats(self, desk32):
        m = M.build_model(desk32)
        rm_before = m.tensors["head.bn.running_mean"].data.copy()
        x = np.random.default_rng(1).random((2, 1, 24, 32, 32), dtype=np.float32)
        m.forward(x, mode="train")
        assert not np.array_equal(m.tensors["head.bn.running_mean"].data, rm_before)


class TestCheckpoint:
    def roundtrip(self, tmp_path, threshold=0.5):
        m = M.build_model(M.preset_config("desk-32", seed=7))
        path = tmp_path / "m.qc3d"
        M.save_checkpoint(m, path, threshold=threshold)
        return m, path

    def test_round_trip_bit_exact(self, tmp_path):
        m, path = self.roundtrip(tmp_path)
        loaded, thr = M.load_checkpoint(path)
        assert thr == 0.5
        assert loaded.config == m.config
        for name, t in m.tensors.items():
            assert np.array_equal(loaded.tensors[name].data, t.data), name

    def test_threshold_survives(self, tmp_path):
        _, path = self.roundtrip(tmp_path, threshold=0.37)
        _, thr = M.load_checkpoint(path)
        assert thr == pytest.approx(0.37, abs=1e-7)

    def test_double_save_identical(self, tmp_path):
        m, path = self.roundtrip(tmp_path)
        other = tmp_path / "again.qc3d"
        M.save_checkpoint(m, other)
        assert path.read_bytes() == other.read_bytes()

    def test_bad_magic(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"ZZZZ"
        path.write_bytes(bytes(raw))
        with pytest.raises(M.BadMagic):
            M.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(M.VersionMismatch):
            M.load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        path.write_bytes(path.read_bytes()[:-64])
        with pytest.raises(M.CorruptTensor):
            M.load_checkpoint(path)

    def test_unknown_tensor_name(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = path.read_bytes().replace(b"stem.conv.weight", b"stem.conv.wrongo", 1)
        path.write_bytes(raw)
        with pytest.raises(M.CorruptTensor):
            M.load_checkpoint(path)

    def test_wrong_tensor_count(self, tmp_path):
        m, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        off = 12 + len(m.config.to_json().encode())
        raw[off : off + 4] = struct.pack("<I", 3)
        path.write_bytes(bytes(raw))
        with pytest.raises(M.CorruptTensor):
            M.load_checkpoint(path)
