"""Generator architecture conformance and weight-loading tests."""

import numpy as np
import pytest
import torch

from chromaloss.archive import ArchiveError, WeightArchive
from chromaloss.colorspace import ColorSpace, ImageBatch
from chromaloss.unet import (
    ENCODER_ARCHIVE_KEYS,
    ConfigError,
    Generator,
    NetworkConfig,
    build,
    load_pretrained_encoder,
    vgg16_features_to_archive,
)


def gray3_input(b=1, h=256, w=256, value=None, seed=0):
    if value is None:
        g = torch.Generator().manual_seed(seed)
        one = torch.rand(b, 1, h, w, generator=g)
    else:
        one = torch.full((b, 1, h, w), float(value))
    return ImageBatch(one.expand(-1, 3, -1, -1).contiguous(), ColorSpace.RGB)


def expected_ladder(c_out, h, w):
    return {
        "conv1_pool": (64, h // 2, w // 2),
        "conv2_pool": (128, h // 4, w // 4),
        "conv3_pool": (256, h // 8, w // 8),
        "conv4_pool": (512, h // 16, w // 16),
        "conv5_up": (512, h // 8, w // 8),
        "conv6_up": (256, h // 4, w // 4),
        "conv7_up": (128, h // 2, w // 2),
        "conv8_up": (64, h, w),
        "conv9": (64, h, w),
        "conv10": (c_out, h, w),
    }


class TestBuild:
    @pytest.mark.parametrize("c_out", [2, 3])
    @pytest.mark.parametrize("size", [256, 32])
    def test_shape_ladder_matches_table(self, c_out, size):
        g = build(NetworkConfig(out_channels=c_out)).eval()
        shapes = {}
        with torch.no_grad():
            out = g(gray3_input(h=size, w=size), shapes=shapes)
        assert shapes == expected_ladder(c_out, size, size)
        assert out.values.shape == (1, c_out, size, size)

    def test_zero_input_finite(self):
        g = build(NetworkConfig(out_channels=2)).eval()
        with torch.no_grad():
            out = g(gray3_input(value=0.0, h=32, w=32))
        assert torch.isfinite(out.values).all()
        assert out.values.shape == (1, 2, 32, 32)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            build(NetworkConfig(stages=4))
        with pytest.raises(ConfigError):
            build(NetworkConfig(out_channels=4))
        with pytest.raises(ConfigError):
            build(NetworkConfig(base_filters=0))

    def test_param_count_differs_only_by_head_channel(self):
        n2 = sum(p.numel() for p in build(NetworkConfig(out_channels=2)).parameters())
        n3 = sum(p.numel() for p in build(NetworkConfig(out_channels=3)).parameters())
        # one extra 1x1 output channel: 64 weights + 1 bias
        assert n3 - n2 == 64 + 1


class TestForward:
    def test_fully_convolutional_small_input(self):
        g = build(NetworkConfig(out_channels=3, base_filters=8)).eval()
        with torch.no_grad():
            out = g(gray3_input(h=32, w=48))
        assert out.values.shape == (1, 3, 32, 48)
        assert out.space is ColorSpace.RGB

    def test_indivisible_size_rejected(self):
        g = build(NetworkConfig(base_filters=8))
        with pytest.raises(ConfigError):
            g(gray3_input(h=30, w=32))

    def test_output_space_and_range(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8)).eval()
        with torch.no_grad():
            out = g(gray3_input(h=32, w=32, seed=2))
        assert out.space is ColorSpace.AB
        assert out.values.min() >= -1.0 and out.values.max() <= 1.0

    def test_gradients_finite_for_all_parameters(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8))
        out = g(gray3_input(h=32, w=32, seed=3))
        loss = (out.values**2).mean()
        loss.backward()
        for name, p in g.named_parameters():
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name

    def test_eval_determinism(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8)).eval()
        x = gray3_input(h=32, w=32, seed=4)
        with torch.no_grad():
            a = g(x).values
            b = g(x).values
        assert torch.equal(a, b)

    def test_distribution_head(self):
        g = build(NetworkConfig(distribution_bins=16, base_filters=8)).eval()
        with torch.no_grad():
            probs = g.predict_distribution(gray3_input(h=32, w=32))
        assert probs.shape == (1, 16, 32, 32)
        assert torch.allclose(probs.sum(dim=1), torch.ones(1, 32, 32), atol=1e-5)
        with pytest.raises(ConfigError):
            g(gray3_input(h=32, w=32))


def make_matching_archive(g: Generator, seed=0) -> WeightArchive:
    rng = np.random.default_rng(seed)
    archive = WeightArchive()
    for name, block in g.encoder_blocks.items():
        for idx, conv in enumerate((block.conv1, block.conv2), start=1):
            archive.put(f"{name}_{idx}.weight", rng.standard_normal(tuple(conv.weight.shape)) * 0.05)
            archive.put(f"{name}_{idx}.bias", rng.standard_normal(tuple(conv.bias.shape)) * 0.05)
    return archive


class TestPretrainedEncoder:
    def test_copy_is_bit_exact(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8))
        archive = make_matching_archive(g)
        load_pretrained_encoder(g, archive)
        got = g.enc1.conv1.weight.detach()
        assert torch.equal(got, archive.get("conv1_1.weight"))

    def test_missing_layer_named_in_error(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8))
        archive = make_matching_archive(g)
        archive._tensors.pop("conv3_2.weight")
        with pytest.raises(ArchiveError, match="conv3_2"):
            load_pretrained_encoder(g, archive)

    def test_shape_mismatch_rejected(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8))
        archive = make_matching_archive(g)
        archive.put("conv2_1.weight", np.zeros((7, 7, 3, 3), dtype=np.float32))
        with pytest.raises(ArchiveError, match="conv2_1"):
            load_pretrained_encoder(g, archive)

    def test_loading_changes_forward_output(self):
        torch.manual_seed(0)
        g = build(NetworkConfig(out_channels=2, base_filters=8)).eval()
        x = gray3_input(h=32, w=32, seed=5)
        with torch.no_grad():
            before = g(x).values.clone()
        load_pretrained_encoder(g, make_matching_archive(g, seed=9))
        with torch.no_grad():
            after = g(x).values
        assert not torch.allclose(before, after)

    def test_decoder_untouched(self):
        g = build(NetworkConfig(out_channels=2, base_filters=8))
        dec_before = g.conv6.conv1.weight.detach().clone()
        load_pretrained_encoder(g, make_matching_archive(g))
        assert torch.equal(dec_before, g.conv6.conv1.weight.detach())

    def test_vgg16_index_mapping(self):
        state = {}
        shapes = {
            0: (64, 3), 2: (64, 64), 5: (128, 64), 7: (128, 128),
            10: (256, 128), 12: (256, 256), 17: (512, 256), 19: (512, 512),
            24: (512, 512), 26: (512, 512),
        }
        for idx, (co, ci) in shapes.items():
            state[f"features.{idx}.weight"] = torch.randn(co, ci, 3, 3)
            state[f"features.{idx}.bias"] = torch.randn(co)
        archive = vgg16_features_to_archive(state)
        assert set(archive.keys()) == {
            f"{k}.{p}" for k in ENCODER_ARCHIVE_KEYS for p in ("weight", "bias")
        }
        g = build(NetworkConfig(out_channels=2))  # full-width encoder
        load_pretrained_encoder(g, archive)
        assert torch.equal(g.enc2.conv1.weight.detach(), state["features.5.weight"])

    def test_archive_roundtrip(self, tmp_path):
        archive = WeightArchive({"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3)})
        path = tmp_path / "weights.npz"
        archive.save(path)
        loaded = WeightArchive.load(path)
        assert torch.equal(loaded.get("a.weight"), archive.get("a.weight"))
