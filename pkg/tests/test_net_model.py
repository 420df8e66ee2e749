import numpy as np
import pytest

from xray2vol.errors import FormatError, TopologyError
from xray2vol.net import (CONFIG_TENSOR, Net, NetworkConfig, config_from_record,
                          config_to_record, load_weights, loss_l2,
                          net_from_weights, network_forward, output_to_volume,
                          save_weights, volume_to_target)
from xray2vol.projector import XRayImage
from xray2vol.volume import Volume


DESK = NetworkConfig()  # 64 -> 32^3
TINY = NetworkConfig(input_size=16, min_resolution=8, base_channels=16,
                     out_depth=4, blocks_per_stage=1)


class TestConfig:
    def test_defaults_are_desk_scale(self):
        assert DESK.input_size == 64 and DESK.out_depth == 32
        assert DESK.output_size == 32

    def test_canonical_shape_arithmetic(self):
        cfg = NetworkConfig(input_size=256, min_resolution=8,
                            base_channels=256, out_depth=128)
        assert cfg.output_size == 128
        assert cfg.n_down == 5

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            NetworkConfig(input_size=48)

    def test_rejects_min_not_below_input(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_size=8, min_resolution=8)

    def test_record_roundtrip(self):
        rec = config_to_record(DESK)
        cfg = config_from_record(rec)
        assert cfg == DESK


class TestForwardShapes:
    def test_desk_shape(self, rng):
        net = Net(DESK, rng)
        out = net.forward(rng.standard_normal((2, 64, 64, 1)).astype(np.float32),
                          training=True)
        assert out.shape == (2, 32, 32, 32)

    def test_tiny_shape(self, rng):
        net = Net(TINY, rng)
        out = net.forward(rng.standard_normal((3, 16, 16, 1)).astype(np.float32),
                          training=False)
        assert out.shape == (3, 8, 8, 4)

    def test_wrong_input_size_rejected(self, rng):
        net = Net(TINY, rng)
        with pytest.raises(ValueError, match="expected"):
            net.forward(rng.standard_normal((1, 32, 32, 1)).astype(np.float32), True)

    def test_inference_deterministic(self, rng):
        net = Net(TINY, rng)
        x = rng.standard_normal((1, 16, 16, 1)).astype(np.float32)
        a = net.forward(x, training=False)
        b = net.forward(x, training=False)
        assert np.array_equal(a, b)

    def test_network_forward_returns_clamped_volume(self, rng):
        net = Net(TINY, rng)
        img = XRayImage(rng.random((16, 16), dtype=np.float32) * 0.9)
        vol = network_forward(img, TINY, net, mode="infer")
        assert vol.dims == (8, 8, 4)
        assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0

    def test_bad_mode_rejected(self, rng):
        net = Net(TINY, rng)
        img = XRayImage(np.zeros((16, 16), np.float32))
        with pytest.raises(ValueError, match="mode"):
            network_forward(img, TINY, net, mode="predict")


class TestTargetLayout:
    def test_volume_target_roundtrip(self, rng):
        v = Volume(rng.random((4, 8, 8), dtype=np.float32))
        t = volume_to_target(v)
        assert t.shape == (8, 8, 4)
        back = output_to_volume(t, clamp=False)
        assert np.array_equal(back.data, v.data)


class TestLoss:
    def test_identical_zero(self, rng):
        v = Volume(rng.random((4, 4, 4), dtype=np.float32))
        assert loss_l2(v, v) == 0.0

    def test_constant_offset_squared(self):
        a = Volume(np.zeros((4, 4, 4), np.float32))
        b = Volume(np.full((4, 4, 4), 0.1, np.float32))
        assert loss_l2(a, b) == pytest.approx(0.01, rel=1e-5)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            loss_l2(np.zeros((2, 2)), np.zeros((2, 3)))


class TestWeightsIO:
    def test_bitwise_roundtrip(self, rng, tmp_path):
        net = Net(TINY, rng)
        sd = net.state_dict()
        sd[CONFIG_TENSOR] = config_to_record(TINY)
        save_weights(sd, tmp_path / "w.xnnw")
        back = load_weights(tmp_path / "w.xnnw")
        assert set(back) == set(sd)
        for k in sd:
            assert np.array_equal(back[k], sd[k]), k

    def test_model_from_file_reproduces_outputs(self, rng, tmp_path):
        net = Net(TINY, rng)
        sd = net.state_dict()
        sd[CONFIG_TENSOR] = config_to_record(TINY)
        save_weights(sd, tmp_path / "w.xnnw")
        net2 = net_from_weights(load_weights(tmp_path / "w.xnnw"))
        x = rng.standard_normal((1, 16, 16, 1)).astype(np.float32)
        assert np.array_equal(net.forward(x, False), net2.forward(x, False))

    def test_truncated_file_rejected(self, rng, tmp_path):
        net = Net(TINY, rng)
        save_weights(net.state_dict(), tmp_path / "w.xnnw")
        raw = (tmp_path / "w.xnnw").read_bytes()
        (tmp_path / "t.xnnw").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_weights(tmp_path / "t.xnnw")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "x.xnnw").write_bytes(b"WXYZ" + b"\0" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_weights(tmp_path / "x.xnnw")

    def test_topology_mismatch_names_layer(self, rng, tmp_path):
        small = Net(TINY, rng)
        sd = small.state_dict()
        sd[CONFIG_TENSOR] = config_to_record(TINY)
        save_weights(sd, tmp_path / "w.xnnw")
        other = NetworkConfig(input_size=16, min_resolution=8, base_channels=8,
                              out_depth=4, blocks_per_stage=1)
        with pytest.raises(TopologyError, match=r"enc1|stem"):
            net_from_weights(load_weights(tmp_path / "w.xnnw"), other)

    def test_missing_tensor_named(self, rng):
        net = Net(TINY, rng)
        sd = net.state_dict()
        sd.pop("head.out.bias")
        fresh = Net(TINY, rng)
        with pytest.raises(TopologyError, match="head.out.bias"):
            fresh.load_state_dict(sd)

    def test_config_record_required_without_cfg(self, rng):
        net = Net(TINY, rng)
        with pytest.raises(TopologyError, match="_config"):
            net_from_weights(net.state_dict())
