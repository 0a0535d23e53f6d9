# -*- coding: utf-8 -*-
"""数値計算エンジンのテスト"""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from numerics import (
    DTYPE,
    Conv2d,
    LayerNorm,
    Linear,
    RandomSource,
    area_downsample,
    backward,
    bilinear_resize,
    conv2d,
    finite_difference_check,
    gradient_of,
    layer_norm,
    linear,
    relu,
    reset_gradients,
    seeded_init,
    sigmoid,
    softmax,
)


def direct_conv(x, k, b, padding):
    """ループによる相互相関（カーネル反転なし）"""
    c_in, h, w = x.shape
    c_out, _, ks, _ = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - ks + 1, w + 2 * padding - ks + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i: i + ks, j: j + ks] * k[o]) + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    @settings(max_examples=40, deadline=None)
    @given(
        c_in=st.integers(1, 8),
        c_out=st.integers(1, 8),
        h=st.integers(1, 8),
        w=st.integers(1, 8),
        ks=st.sampled_from([1, 3, 5, 7]),
        same=st.booleans(),
        with_bias=st.booleans(),
        seed=st.integers(0, 2 ** 32 - 1),
    )
    def test_matches_direct_loop(self, c_in, c_out, h, w, ks, same, with_bias, seed):
        padding = (ks - 1) // 2 if same else 0
        assume(h + 2 * padding >= ks and w + 2 * padding >= ks)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(c_in, h, w))
        k = rng.normal(size=(c_out, c_in, ks, ks))
        b = rng.normal(size=c_out) if with_bias else None
        out = conv2d(torch.from_numpy(x), torch.from_numpy(k), None if b is None else torch.from_numpy(b), padding)
        np.testing.assert_allclose(out.numpy(), direct_conv(x, k, b, padding), rtol=1e-12, atol=1e-12)

    def test_identity_kernel(self):
        x = torch.randn(1, 5, 5, dtype=DTYPE)
        k = torch.zeros(1, 1, 3, 3, dtype=DTYPE)
        k[0, 0, 1, 1] = 1.0
        assert torch.equal(conv2d(x, k, padding=1), x)

    def test_batched_input(self):
        x = torch.randn(4, 2, 6, 6, dtype=DTYPE)
        k = torch.randn(3, 2, 3, 3, dtype=DTYPE)
        out = conv2d(x, k, padding=1)
        assert out.shape == (4, 3, 6, 6)
        assert torch.allclose(out[2], conv2d(x[2], k, padding=1))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(torch.zeros(2, 4, 4, dtype=DTYPE), torch.zeros(1, 3, 3, 3, dtype=DTYPE))

    def test_even_kernel(self):
        with pytest.raises(ValueError):
            conv2d(torch.zeros(1, 4, 4, dtype=DTYPE), torch.zeros(1, 1, 2, 2, dtype=DTYPE))

    def test_unsupported_padding(self):
        with pytest.raises(ValueError):
            conv2d(torch.zeros(1, 4, 4, dtype=DTYPE), torch.zeros(1, 1, 3, 3, dtype=DTYPE), padding=2)


class TestElementwise:
    def test_linear_shape_check(self):
        with pytest.raises(ValueError):
            linear(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(4, 5, dtype=DTYPE))

    def test_linear_affine(self):
        x = torch.tensor([[1.0, 2.0]], dtype=DTYPE)
        w = torch.tensor([[1.0, 0.0], [0.0, 3.0]], dtype=DTYPE)
        b = torch.tensor([0.5, -1.0], dtype=DTYPE)
        assert torch.equal(linear(x, w, b), torch.tensor([[1.5, 5.0]], dtype=DTYPE))

    @settings(max_examples=40, deadline=None)
    @given(
        batch=st.integers(1, 8),
        d_in=st.integers(1, 8),
        d_out=st.integers(1, 8),
        seed=st.integers(0, 2 ** 32 - 1),
    )
    def test_linear_matches_direct_loop(self, batch, d_in, d_out, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.normal(size=(batch, d_in)), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
        expected = np.array([[sum(x[n, i] * w[o, i] for i in range(d_in)) + b[o] for o in range(d_out)] for n in range(batch)])
        out = linear(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b))
        np.testing.assert_allclose(out.numpy(), expected, rtol=1e-12, atol=1e-12)

    def test_softmax_stable_for_large_logits(self):
        out = softmax(torch.tensor([1000.0, 1000.0, -1000.0], dtype=DTYPE))
        assert torch.all(torch.isfinite(out))
        assert out[0].item() == pytest.approx(0.5)
        assert out[2].item() == 0.0

    def test_softmax_rows_sum_to_one(self):
        out = softmax(torch.randn(5, 7, dtype=DTYPE), axis=-1)
        assert torch.allclose(out.sum(-1), torch.ones(5, dtype=DTYPE))

    def test_relu_sigmoid(self):
        x = torch.tensor([-2.0, 0.0, 3.0], dtype=DTYPE)
        assert torch.equal(relu(x), torch.tensor([0.0, 0.0, 3.0], dtype=DTYPE))
        assert sigmoid(torch.zeros(1, dtype=DTYPE)).item() == 0.5

    def test_layer_norm_channel_axis(self):
        x = torch.randn(2, 6, 4, 4, dtype=DTYPE) * 3 + 1
        out = layer_norm(x, torch.ones(6, dtype=DTYPE), torch.zeros(6, dtype=DTYPE))
        assert torch.allclose(out.mean(dim=1), torch.zeros(2, 4, 4, dtype=DTYPE), atol=1e-12)
        assert torch.allclose(out.var(dim=1, unbiased=False), torch.ones(2, 4, 4, dtype=DTYPE), atol=1e-3)

    def test_bilinear_resize_constant(self):
        x = torch.full((2, 4, 4), 0.25, dtype=DTYPE)
        assert torch.allclose(bilinear_resize(x, (8, 8)), torch.full((2, 8, 8), 0.25, dtype=DTYPE))

    def test_area_downsample(self):
        x = torch.arange(16, dtype=DTYPE).reshape(1, 4, 4)
        out = area_downsample(x, 2)
        assert torch.equal(out, torch.tensor([[[2.5, 4.5], [10.5, 12.5]]], dtype=DTYPE))
        with pytest.raises(ValueError):
            area_downsample(torch.zeros(1, 5, 4, dtype=DTYPE), 2)


class TestBackward:
    def test_non_scalar_loss_rejected(self):
        p = nn.Parameter(torch.ones(3, dtype=DTYPE))
        with pytest.raises(ValueError):
            backward(p * 2)

    def test_constant_loss_gives_zero_gradient(self):
        p = nn.Parameter(torch.ones(3, dtype=DTYPE))
        reset_gradients([p])
        backward(torch.tensor(1.0, dtype=DTYPE))
        assert torch.equal(gradient_of(p), torch.zeros(3, dtype=DTYPE))

    def test_gradients_accumulate_without_reset(self):
        p = nn.Parameter(torch.tensor([1.0, 2.0], dtype=DTYPE))
        reset_gradients([p])
        backward((p ** 2).sum())
        backward((p ** 2).sum())
        assert torch.equal(gradient_of(p), torch.tensor([4.0, 8.0], dtype=DTYPE))

    def test_finite_difference_on_small_network(self):
        with seeded_init(1):
            conv = Conv2d(2, 4, 3)
            norm = LayerNorm(4)
            head = Linear(4, 1)
        x = torch.randn(2, 2, 6, 6, dtype=DTYPE, generator=torch.Generator().manual_seed(0))

        def loss_fn():
            h = relu(norm(conv(x))).mean(dim=(-2, -1))
            return (head(h) ** 2).mean()

        params = {f"conv.{n}": p for n, p in conv.named_parameters()}
        params.update({f"head.{n}": p for n, p in head.named_parameters()})
        records = finite_difference_check(loss_fn, params, coordinates=20)
        assert len(records) == 20
        assert max(r.relative_error for r in records) < 1e-4

    def test_finite_difference_coordinates_capped(self):
        p = nn.Parameter(torch.tensor([0.5, -0.5], dtype=DTYPE))
        records = finite_difference_check(lambda: (p ** 3).sum(), {"p": p}, coordinates=20)
        assert len(records) == 2
        assert all(r.numeric == pytest.approx(3 * 0.25, rel=1e-8) for r in records)


class TestRandomSource:
    def test_reproducible(self):
        a = RandomSource(42).normal((3, 4))
        b = RandomSource(42).normal((3, 4))
        assert np.array_equal(a, b)

    def test_streams_are_independent(self):
        source = RandomSource(7)
        assert not np.array_equal(source.spawn(1).normal((8,)), source.spawn(2).normal((8,)))

    def test_rejects_negative_seed(self):
        with pytest.raises(ValueError):
            RandomSource(-1)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2 ** 63), n=st.integers(min_value=1, max_value=50))
    def test_choice_without_replacement(self, seed, n):
        picked = RandomSource(seed).choice(n, max(n // 2, 1))
        assert len(set(picked.tolist())) == len(picked)
        assert picked.min() >= 0 and picked.max() < n

    def test_seeded_init_does_not_touch_global_state(self):
        torch.manual_seed(123)
        expected = torch.rand(1)
        torch.manual_seed(123)
        with seeded_init(5):
            Conv2d(1, 1, 3)
        assert torch.equal(torch.rand(1), expected)

    def test_zero_init_layers(self):
        conv = Conv2d(3, 2, 1, zero_init=True)
        assert torch.count_nonzero(conv.weight) == 0 and torch.count_nonzero(conv.bias) == 0
        assert math.isclose(float(Linear(2, 2, zero_init=True)(torch.ones(2, dtype=DTYPE)).abs().sum()), 0.0)
