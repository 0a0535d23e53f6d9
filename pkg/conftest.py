# -*- coding: utf-8 -*-
"""テスト共通のフィクスチャ（合成キューブ・合成画像）"""

import numpy as np
import pytest
import torch

from hsi_data import DEFAULT_WAVELENGTHS, HsiCube


def random_cube(bands=48, height=16, width=16, seed=0, wavelengths=None):
    rng = np.random.default_rng(seed)
    grid = DEFAULT_WAVELENGTHS if wavelengths is None else np.asarray(wavelengths, dtype=np.float64)
    if grid.size != bands:
        grid = np.linspace(400.0, 1000.0, bands)
    return HsiCube(rng.uniform(0.05, 0.95, size=(bands, height, width)), grid)


def textured_cube(bands=48, height=32, width=32, amplitude=0.1):
    """
    バンドごとに一定の基準値 + 共通の高周波テクスチャ（振幅はバンドごとに異なる）

    どのバンドのテクスチャも RGB 成分の線形結合で表せるため、RGB ガイドが効く。
    """
    y, x = np.mgrid[0:height, 0:width]
    texture = np.sin(2 * np.pi * x / 8.0) * np.sin(2 * np.pi * y / 8.0)
    base = np.linspace(0.3, 0.7, bands)[:, None, None]
    gain = np.linspace(0.5, 1.0, bands)[:, None, None]
    return HsiCube(base + amplitude * gain * texture, np.linspace(400.0, 1000.0, bands))


def smooth_images(count=16, channels=3, size=32, seed=0):
    """ランダムな色と向きのなめらかなグラデーション画像 [N, C, H, W]"""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / (size - 1)
    images = []
    for _ in range(count):
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * x + np.sin(angle) * y
        ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
        low = rng.uniform(0.1, 0.5, size=(channels, 1, 1))
        high = rng.uniform(0.5, 0.9, size=(channels, 1, 1))
        images.append(low + (high - low) * ramp[None])
    return torch.from_numpy(np.stack(images))


@pytest.fixture
def cube():
    return random_cube()


@pytest.fixture
def small_cube():
    return random_cube(bands=8, height=8, width=8, seed=3)
