# -*- coding: utf-8 -*-
"""RGB ガイド付き超解像（窓分割・矩形クロスアテンション・GAL・学習）のテスト"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cube, textured_cube
from hsi_data import extract_rgb
from metrics import psnr
from numerics import DTYPE, NumericalError, bilinear_resize, conv2d, finite_difference_check, seeded_init
from rgan import (
    RGAN,
    AttentionConfig,
    GuidedAttentionLayer,
    RcaWeights,
    RectangularCrossAttention,
    RganTrainConfig,
    SpectralAttention,
    gal_forward,
    load_rgan,
    make_training_pairs,
    partition_windows,
    project_qkv,
    rca_forward,
    reverse_windows,
    rgan_forward,
    rgan_loss,
    save_rgan,
    train_rgan,
)


def generator(seed):
    return torch.Generator().manual_seed(seed)


def randn(*shape, seed=0):
    return torch.randn(*shape, dtype=DTYPE, generator=generator(seed))


def random_weights(config, seed, with_position=True):
    c, k = config.channels, config.qkv_kernel
    tokens_h = config.window_h[0] * config.window_h[1]
    tokens_v = config.window_v[0] * config.window_v[1]
    scale = 0.3
    return RcaWeights(
        randn(3 * c, c, k, k, seed=seed) * scale,
        randn(3 * c, seed=seed + 1) * scale,
        randn(3 * c, c, k, k, seed=seed + 2) * scale,
        randn(3 * c, seed=seed + 3) * scale,
        randn(config.heads, tokens_h, tokens_h, seed=seed + 4) if with_position else None,
        randn(config.heads, tokens_v, tokens_v, seed=seed + 5) if with_position else None,
    )


def dense_window_attention(q, k, v, window, heads, position):
    """窓ごとに h*w x h*w の注意行列を明示的に組み立てるループ実装"""
    q, k, v = q.numpy(), k.numpy(), v.numpy()
    channels, height, width = q.shape
    h, w = window
    d = channels // heads
    out = np.zeros_like(q)
    for r0 in range(0, height, h):
        for c0 in range(0, width, w):
            coords = [(r0 + i, c0 + j) for i in range(h) for j in range(w)]
            for head in range(heads):
                ch = slice(head * d, (head + 1) * d)
                qm = np.array([q[ch, y, x] for y, x in coords])
                km = np.array([k[ch, y, x] for y, x in coords])
                vm = np.array([v[ch, y, x] for y, x in coords])
                logits = qm @ km.T / math.sqrt(d)
                if position is not None:
                    logits = logits + position[head].numpy()
                logits = np.exp(logits - logits.max(axis=1, keepdims=True))
                attn = logits / logits.sum(axis=1, keepdims=True)
                o = attn @ vm
                for t, (y, x) in enumerate(coords):
                    out[ch, y, x] = o[t]
    return out


def dense_rca(z1, z2, config, weights):
    pad = (config.qkv_kernel - 1) // 2
    q1, k1, v1 = torch.chunk(conv2d(z1, weights.qkv1_weight, weights.qkv1_bias, pad), 3, dim=0)
    q2, k2, v2 = torch.chunk(conv2d(z2, weights.qkv2_weight, weights.qkv2_bias, pad), 3, dim=0)
    half = config.channels // 2
    parts = ((slice(0, half), config.window_h, weights.pos_h), (slice(half, None), config.window_v, weights.pos_v))
    out1 = [dense_window_attention(q2[s], k1[s], v1[s], win, config.heads, pos) for s, win, pos in parts]
    out2 = [dense_window_attention(q1[s], k2[s], v2[s], win, config.heads, pos) for s, win, pos in parts]
    return np.concatenate(out1), np.concatenate(out2)


class TestAttentionConfig:
    def test_defaults(self):
        config = AttentionConfig()
        assert config.head_dim == 4
        assert config.multiple() == (8, 8)

    def test_rejects_odd_channels(self):
        with pytest.raises(ValueError):
            AttentionConfig(channels=7)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            AttentionConfig(channels=6, heads=2)

    def test_rejects_wrong_window_orientation(self):
        with pytest.raises(ValueError):
            AttentionConfig(window_h=(8, 2))
        with pytest.raises(ValueError):
            AttentionConfig(window_v=(2, 8))

    def test_singleton_windows_allowed(self):
        config = AttentionConfig(window_h=(1, 1), window_v=(1, 1))
        assert config.multiple() == (1, 1)


class TestWindows:
    def test_window_count(self):
        windowed = partition_windows(randn(4, 8, 8), (2, 4))
        assert windowed.count == 8
        assert windowed.windows.shape == (8, 8, 4)

    def test_row_major_tokens(self):
        x = torch.arange(16, dtype=DTYPE).reshape(1, 4, 4)
        windowed = partition_windows(x, (2, 2))
        assert windowed.windows[1, :, 0].tolist() == [2.0, 3.0, 6.0, 7.0]

    def test_singleton_windows(self):
        x = randn(2, 3, 5)
        windowed = partition_windows(x, (1, 1))
        assert windowed.count == 15
        assert torch.equal(windowed.windows[6, 0], x[:, 1, 1])

    def test_indivisible_extent(self):
        with pytest.raises(ValueError):
            partition_windows(randn(2, 6, 8), (4, 4))

    @settings(max_examples=30, deadline=None)
    @given(
        h=st.sampled_from([1, 2, 3, 6]),
        w=st.sampled_from([1, 2, 4, 8]),
        batched=st.booleans(),
        seed=st.integers(0, 1000),
    )
    def test_round_trip_is_exact(self, h, w, batched, seed):
        shape = (2, 3, 6, 8) if batched else (3, 6, 8)
        x = randn(*shape, seed=seed)
        assert torch.equal(reverse_windows(partition_windows(x, (h, w))), x)


class TestProjectQkv:
    def test_zero_weights(self):
        q, k, v = project_qkv(randn(4, 4, 4), torch.zeros(12, 4, 3, 3, dtype=DTYPE))
        assert all(torch.count_nonzero(t) == 0 for t in (q, k, v))

    def test_identity_kernel(self):
        c = 4
        weight = torch.zeros(3 * c, c, 1, 1, dtype=DTYPE)
        for i in range(c):
            for part in range(3):
                weight[i + part * c, i] = 1.0
        z = randn(c, 5, 5)
        q, k, v = project_qkv(z, weight)
        assert torch.equal(q, z) and torch.equal(k, z) and torch.equal(v, z)

    def test_matches_conv_then_slice(self):
        z, weight, bias = randn(6, 5, 5, seed=1), randn(18, 6, 3, 3, seed=2), randn(18, seed=3)
        full = conv2d(z, weight, bias, padding=1)
        q, k, v = project_qkv(z, weight, bias)
        assert torch.equal(torch.cat([q, k, v]), full)

    def test_odd_channels(self):
        with pytest.raises(ValueError):
            project_qkv(randn(3, 4, 4), randn(9, 3, 3, 3))


RCA_CASES = [
    (channels, heads, windows, seed)
    for seed, (channels, heads, windows) in enumerate(
        [
            (c, h, win)
            for c in (4, 8)
            for h in (1, 2)
            for win in ("rect", "single")
            if c % (2 * h) == 0
        ]
        * 3
    )
][:20]


class TestRectangularCrossAttention:
    @pytest.mark.parametrize("channels,heads,windows,seed", RCA_CASES)
    def test_matches_dense_oracle(self, channels, heads, windows, seed):
        if windows == "rect":
            config = AttentionConfig(channels=channels, heads=heads)
            size = 8
        else:
            config = AttentionConfig(channels=channels, heads=heads, window_h=(1, 1), window_v=(1, 1))
            size = 4
        weights = random_weights(config, seed * 10)
        z1, z2 = randn(channels, size, size, seed=seed + 100), randn(channels, size, size, seed=seed + 200)

        out1, out2 = rca_forward(z1, z2, config, weights)
        expected1, expected2 = dense_rca(z1, z2, config, weights)
        np.testing.assert_allclose(out1.numpy(), expected1, atol=1e-10, rtol=0)
        np.testing.assert_allclose(out2.numpy(), expected2, atol=1e-10, rtol=0)

    def test_zero_values_give_zero_output(self):
        config = AttentionConfig()
        weights = random_weights(config, 5)
        c = config.channels
        weights.qkv1_weight[2 * c:] = 0.0
        weights.qkv1_bias[2 * c:] = 0.0
        weights.qkv2_weight[2 * c:] = 0.0
        weights.qkv2_bias[2 * c:] = 0.0
        out1, out2 = rca_forward(randn(c, 8, 8, seed=1), randn(c, 8, 8, seed=2), config, weights)
        assert torch.count_nonzero(out1) == 0 and torch.count_nonzero(out2) == 0

    def test_singleton_window_returns_values(self):
        config = AttentionConfig(window_h=(1, 1), window_v=(1, 1), heads=2)
        weights = random_weights(config, 7)
        z1, z2 = randn(8, 4, 4, seed=1), randn(8, 4, 4, seed=2)
        out1, out2 = rca_forward(z1, z2, config, weights)
        _, _, v1 = project_qkv(z1, weights.qkv1_weight, weights.qkv1_bias)
        _, _, v2 = project_qkv(z2, weights.qkv2_weight, weights.qkv2_bias)
        assert torch.allclose(out1, v1, atol=1e-14, rtol=0)
        assert torch.allclose(out2, v2, atol=1e-14, rtol=0)

    def test_swapping_inputs_swaps_outputs(self):
        config = AttentionConfig(heads=2)
        w = random_weights(config, 11)
        swapped = RcaWeights(w.qkv2_weight, w.qkv2_bias, w.qkv1_weight, w.qkv1_bias, w.pos_h, w.pos_v)
        z1, z2 = randn(8, 8, 8, seed=3), randn(8, 8, 8, seed=4)
        out1, out2 = rca_forward(z1, z2, config, w)
        back2, back1 = rca_forward(z2, z1, config, swapped)
        assert torch.allclose(out1, back1, atol=1e-12) and torch.allclose(out2, back2, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        config = AttentionConfig(heads=2)
        rows = []
        rca_forward(randn(8, 8, 16, seed=1), randn(8, 8, 16, seed=2), config, random_weights(config, 3), rows.append)
        assert len(rows) == 4
        for attn in rows:
            assert torch.allclose(attn.sum(dim=-1), torch.ones_like(attn[..., 0]), atol=1e-9)

    def test_shape_mismatch(self):
        config = AttentionConfig()
        with pytest.raises(ValueError):
            rca_forward(randn(8, 8, 8), randn(8, 8, 16), config, random_weights(config, 0))

    def test_indivisible_extent(self):
        config = AttentionConfig()
        with pytest.raises(ValueError):
            rca_forward(randn(8, 8, 12), randn(8, 8, 12), config, random_weights(config, 0))

    def test_module_is_batched(self):
        config = AttentionConfig()
        with seeded_init(0):
            module = RectangularCrossAttention(config)
        z1, z2 = randn(2, 8, 8, 8, seed=1), randn(2, 8, 8, 8, seed=2)
        out1, _ = module(z1, z2)
        single1, _ = module(z1[1], z2[1])
        assert out1.shape == z1.shape
        assert torch.allclose(out1[1], single1, atol=1e-12)


class TestGuidedAttentionLayer:
    def test_zero_weights_are_identity(self):
        config = AttentionConfig()
        with seeded_init(0):
            layer = GuidedAttentionLayer(config)
        with torch.no_grad():
            for p in layer.parameters():
                p.zero_()
        hsi, rgb = randn(8, 8, 8, seed=1), randn(8, 8, 8, seed=2)
        out_hsi, out_rgb = gal_forward(hsi, rgb, layer)
        assert torch.equal(out_hsi, hsi) and torch.equal(out_rgb, rgb)

    def test_spectral_gate_matches_squeeze_formula(self):
        with seeded_init(4):
            spec = SpectralAttention(8, reduction=2)
        x = randn(2, 8, 5, 6, seed=7)
        pooled = x.numpy().mean(axis=(-2, -1))
        hidden = np.maximum(pooled @ spec.fc1.weight.detach().numpy().T + spec.fc1.bias.detach().numpy(), 0.0)
        logits = hidden @ spec.fc2.weight.detach().numpy().T + spec.fc2.bias.detach().numpy()
        gate = 1.0 / (1.0 + np.exp(-logits))

        # 1x1 射影を恒等にするとゲートがチャネルを直接スケールする
        with torch.no_grad():
            spec.proj.weight.copy_(torch.eye(8, dtype=DTYPE)[:, :, None, None])
            spec.proj.bias.zero_()
        np.testing.assert_allclose(spec(x).numpy(), x.numpy() * gate[..., None, None], atol=1e-12)

        with torch.no_grad():
            for p in spec.parameters():
                p.zero_()
        assert torch.count_nonzero(spec(x)) == 0

    @pytest.mark.parametrize("heads,size", [(1, 8), (2, 16)])
    def test_shape_preserved(self, heads, size):
        config = AttentionConfig(heads=heads)
        with seeded_init(heads):
            layer = GuidedAttentionLayer(config)
        out_hsi, out_rgb = gal_forward(randn(2, 8, size, 8), randn(2, 8, size, 8), layer)
        assert out_hsi.shape == (2, 8, size, 8) and out_rgb.shape == (2, 8, size, 8)

    def test_shape_mismatch(self):
        with seeded_init(0):
            layer = GuidedAttentionLayer(AttentionConfig())
        with pytest.raises(ValueError):
            gal_forward(randn(8, 8, 8), randn(8, 16, 8), layer)

    def test_gradient_through_two_layers(self):
        config = AttentionConfig()
        with seeded_init(2):
            layers = [GuidedAttentionLayer(config) for _ in range(2)]
        hsi, rgb = randn(8, 8, 8, seed=5), randn(8, 8, 8, seed=6)

        def loss_fn():
            h, g = hsi, rgb
            for layer in layers:
                h, g = gal_forward(h, g, layer)
            return (h ** 2).mean() + 0.5 * (g ** 2).mean()

        params = {f"{i}.{n}": p for i, layer in enumerate(layers) for n, p in layer.named_parameters()}
        records = finite_difference_check(loss_fn, params, coordinates=20)
        assert max(r.relative_error for r in records) < 1e-4


class TestRgan:
    def test_initial_output_is_bilinear_upsample(self):
        cube = random_cube(bands=6, height=8, width=8)
        model = RGAN(6, scale=2)
        rgb = np.random.default_rng(0).uniform(size=(3, 16, 16))
        out = rgan_forward(cube, rgb, model)
        expected = bilinear_resize(torch.from_numpy(cube.values), (16, 16)).numpy()
        np.testing.assert_allclose(out.values, expected, atol=1e-12)
        assert out.meta["sr_scale"] == 2

    def test_padding_for_window_multiple(self):
        cube = random_cube(bands=4, height=5, width=6)
        model = RGAN(4, scale=2)
        out = rgan_forward(cube, np.zeros((3, 10, 12)), model, guidance=False)
        assert out.values.shape == (4, 10, 12)
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0

    def test_scale_four(self):
        cube = random_cube(bands=3, height=4, width=4)
        model = RGAN(3, scale=4)
        assert rgan_forward(cube, np.zeros((3, 16, 16)), model).values.shape == (3, 16, 16)

    def test_scale_mismatch(self):
        model = RGAN(6, scale=2)
        with pytest.raises(ValueError):
            rgan_forward(random_cube(bands=6, height=8, width=8), np.zeros((3, 32, 32)), model)
        with pytest.raises(ValueError):
            model(randn(1, 6, 8, 8), randn(1, 3, 24, 24))

    def test_band_mismatch(self):
        with pytest.raises(ValueError):
            rgan_forward(random_cube(bands=5, height=8, width=8), np.zeros((3, 16, 16)), RGAN(6))

    def test_unsupported_scale(self):
        with pytest.raises(ValueError):
            RGAN(6, scale=3)

    def test_full_model_gradient_check(self):
        model = RGAN(6, AttentionConfig(channels=8, layers=2), scale=2, seed=1)
        with torch.no_grad():
            model.head.weight.copy_(randn(*model.head.weight.shape, seed=9) * 0.1)
            for layer in model.layers:
                for rca in (layer.sal_hsi, layer.sal_rgb, layer.cal):
                    rca.pos_h.copy_(randn(*rca.pos_h.shape, seed=10) * 0.1)
                    rca.pos_v.copy_(randn(*rca.pos_v.shape, seed=11) * 0.1)
        lr, rgb = randn(1, 6, 4, 4, seed=1), randn(1, 3, 8, 8, seed=2)
        target = randn(1, 6, 8, 8, seed=3)

        def loss_fn():
            return ((model(lr, rgb) - target) ** 2).mean()

        records = finite_difference_check(loss_fn, dict(model.named_parameters()), coordinates=20)
        assert len(records) == 20
        assert max(r.relative_error for r in records) < 1e-4

    def test_checkpoint_round_trip(self, tmp_path):
        model = RGAN(5, AttentionConfig(heads=2, layers=1), scale=4, seed=3)
        manifest = save_rgan(model, tmp_path / "rgan")
        assert manifest.suffix == ".json" and (tmp_path / "rgan.bin").exists()
        loaded = load_rgan(tmp_path / "rgan")
        assert loaded.scale == 4 and loaded.config == model.config
        for (name, p), (_, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(q, p.float().double()), name


class TestTraining:
    def test_perfect_prediction_has_zero_loss(self):
        target = randn(2, 4, 8, 8)
        assert rgan_loss(target, target).item() == 0.0

    def test_training_pairs(self):
        pairs = make_training_pairs([textured_cube()], scale=2)
        assert pairs[0].lr.shape == (48, 16, 16)
        assert pairs[0].rgb.shape == (3, 32, 32)
        assert pairs[0].hr.shape == (48, 32, 32)

    def test_same_seed_same_losses(self):
        pairs = make_training_pairs([random_cube(bands=4, height=16, width=16, seed=s) for s in range(3)], 2)
        config = RganTrainConfig(steps=5, lr=1e-3, seed=4)
        a = train_rgan(pairs, RGAN(4, seed=1), config).losses
        b = train_rgan(pairs, RGAN(4, seed=1), config).losses
        assert a == b and len(a) == 5

    def test_empty_pairs(self):
        with pytest.raises(ValueError):
            train_rgan([], RGAN(4))

    def test_non_finite_loss_aborts(self):
        pairs = make_training_pairs([random_cube(bands=4, height=16, width=16)], 2)
        model = RGAN(4)
        with torch.no_grad():
            model.head.bias.fill_(float("nan"))
        with pytest.raises(NumericalError):
            train_rgan(pairs, model, RganTrainConfig(steps=3))

    @pytest.mark.slow
    def test_overfit_single_pair(self):
        cube = textured_cube(bands=48, height=64, width=64)
        pairs = make_training_pairs([cube], scale=2)
        model = RGAN(48, scale=2, seed=0)
        config = RganTrainConfig(steps=200, lr=5e-3, lr_min=5e-4, batch_size=1, weight_decay=0.0)
        result = train_rgan(pairs, model, config)
        assert result.losses[-1] < 0.1 * result.losses[0]

        lr_cube = cube.with_values(pairs[0].lr)
        out = rgan_forward(lr_cube, extract_rgb(cube), result.model)
        assert psnr(out.values, cube.values) > 40.0
