# -*- coding: utf-8 -*-
"""条件マップ（スタック・プロキシ・グローバル埋め込み）のテスト"""

import numpy as np
import pytest
import torch

from conditions import (
    CONTENT_DIM,
    GLOBAL_DIM,
    TEXT_CATEGORIES,
    ConditionStack,
    build_conditions,
    global_embedding,
    hed_proxy,
    mlsd_proxy,
    segmentation_proxy,
    stack_conditions,
    text_vector,
)


def two_region_rgb(size=16):
    rgb = np.full((3, size, size), 0.2)
    rgb[:, :, size // 2:] = 0.8
    return rgb


class TestConditionStack:
    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            ConditionStack({"depth": np.zeros((1, 4, 4))})

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            ConditionStack({"hed": np.zeros((1, 4, 4)), "seg": np.zeros((1, 8, 8))})

    def test_two_dim_maps_gain_channel_axis(self):
        stack = ConditionStack({"hed": np.zeros((4, 6))})
        assert stack.spatial_maps["hed"].shape == (1, 4, 6)
        assert stack.extents == (4, 6)

    def test_empty(self):
        assert ConditionStack().is_empty()
        assert ConditionStack().extents is None
        assert not ConditionStack(global_embedding=np.zeros(GLOBAL_DIM)).is_empty()

    def test_resized_and_without(self):
        stack = ConditionStack({"hed": np.ones((1, 4, 4)), "seg": np.ones((1, 4, 4))})
        resized = stack.resized((8, 8))
        assert resized.extents == (8, 8)
        assert torch.allclose(resized.spatial_maps["hed"], torch.ones(1, 8, 8, dtype=torch.float64))
        assert stack.without("hed").tags == ("seg",)
        assert stack.tags == ("hed", "seg")

    def test_select_batch(self):
        maps = torch.arange(3 * 4, dtype=torch.float64).reshape(3, 1, 2, 2)
        stack = ConditionStack({"lowres": maps}, torch.eye(3, dtype=torch.float64))
        picked = stack.select([2, 0])
        assert torch.equal(picked.spatial_maps["lowres"][0], maps[2])
        assert torch.equal(picked.global_embedding[1], torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))


class TestProxies:
    def test_hed_marks_boundary(self):
        edges = hed_proxy(two_region_rgb())
        assert edges.max() == 1.0
        assert edges[:, 7:9].min() > 0.0
        assert edges[:, :5].max() == 0.0

    def test_hed_flat_image(self):
        assert hed_proxy(np.full((3, 8, 8), 0.5)).max() == 0.0

    def test_segmentation_labels_regions(self):
        seg = segmentation_proxy(two_region_rgb())
        assert len(np.unique(seg)) == 2
        assert seg.max() == 1.0

    def test_mlsd_keeps_straight_boundary(self):
        lines = mlsd_proxy(two_region_rgb(), min_length=8)
        assert lines[:, 7:9].sum() > 0

    def test_build_conditions(self):
        stack = build_conditions(two_region_rgb(), ["hed", "seg"], category="farmland", with_content=True)
        assert stack.tags == ("hed", "seg")
        assert stack.global_embedding.shape == (GLOBAL_DIM,)
        assert stack.global_embedding[0].item() == 1.0

    def test_build_conditions_rejects_tag_without_proxy(self):
        with pytest.raises(ValueError):
            build_conditions(two_region_rgb(), ["lowres"])


class TestGlobalEmbedding:
    def test_text_one_hot(self):
        vec = text_vector("wasteland")
        assert vec.sum() == 1.0 and vec[TEXT_CATEGORIES.index("wasteland")] == 1.0
        with pytest.raises(ValueError):
            text_vector("ocean")

    def test_missing_parts_are_zero(self):
        assert global_embedding() is None
        only_text = global_embedding(category="city building")
        assert only_text.shape == (GLOBAL_DIM,)
        assert np.all(only_text[-CONTENT_DIM:] == 0)

    def test_stack_conditions(self):
        stacks = [build_conditions(two_region_rgb(), ["hed"], category=c) for c in TEXT_CATEGORIES[:2]]
        batched = stack_conditions(stacks)
        assert batched.spatial_maps["hed"].shape == (2, 1, 16, 16)
        assert batched.global_embedding.shape == (2, GLOBAL_DIM)

    def test_stack_conditions_requires_same_tags(self):
        a = build_conditions(two_region_rgb(), ["hed"])
        b = build_conditions(two_region_rgb(), ["seg"])
        with pytest.raises(ValueError):
            stack_conditions([a, b])
