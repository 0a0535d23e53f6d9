#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
条件マップモジュール
拡散モデルに与える空間条件マップ（HED / セグメンテーション / スケッチ / MLSD /
低解像度画像 / 任意）とグローバル埋め込み（コンテンツ・テキスト）をまとめる。

学習済みの抽出器は使わず、自己完結テスト用の簡易プロキシを内蔵している。
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from numerics import as_array, bilinear_resize

CONDITION_TAGS = ("hed", "seg", "sketch", "mlsd", "lowres", "custom")

# テキスト条件のカテゴリ
TEXT_CATEGORIES = ("farmland", "city building", "architecture", "wasteland")

CONTENT_DIM = 4
GLOBAL_DIM = len(TEXT_CATEGORIES) + CONTENT_DIM


@dataclass
class ConditionStack:
    """
    空間条件マップ（タグ → [c, H, W] または [N, c, H, W]）と任意のグローバル埋め込み

    全マップは同じ空間サイズを共有する。タグは辞書のキーなので重複しない。
    """

    spatial_maps: Dict[str, torch.Tensor] = field(default_factory=dict)
    global_embedding: Optional[torch.Tensor] = None

    def __post_init__(self):
        if len(self.spatial_maps) > 6:
            raise ValueError(f"空間条件は最大6個です: {len(self.spatial_maps)}")
        maps = {}
        extents = None
        for tag, value in self.spatial_maps.items():
            if tag not in CONDITION_TAGS:
                raise ValueError(f"未知の条件タグ: {tag}（対応: {', '.join(CONDITION_TAGS)}）")
            t = as_array(value)
            if t.dim() == 2:
                t = t.unsqueeze(0)
            if t.dim() not in (3, 4):
                raise ValueError(f"条件マップ {tag} の形状が不正です: {tuple(t.shape)}")
            if extents is None:
                extents = tuple(t.shape[-2:])
            elif tuple(t.shape[-2:]) != extents:
                raise ValueError(f"条件マップ {tag} のサイズ {tuple(t.shape[-2:])} が {extents} と一致しません")
            maps[tag] = t
        self.spatial_maps = maps
        if self.global_embedding is not None:
            self.global_embedding = as_array(self.global_embedding)

    @property
    def tags(self) -> Tuple[str, ...]:
        return tuple(self.spatial_maps.keys())

    @property
    def extents(self) -> Optional[Tuple[int, int]]:
        for t in self.spatial_maps.values():
            return tuple(t.shape[-2:])
        return None

    def is_empty(self) -> bool:
        return not self.spatial_maps and self.global_embedding is None

    def resized(self, size: Tuple[int, int]) -> "ConditionStack":
        size = tuple(int(s) for s in size)
        maps = {
            tag: (t if tuple(t.shape[-2:]) == size else bilinear_resize(t, size))
            for tag, t in self.spatial_maps.items()
        }
        return ConditionStack(maps, self.global_embedding)

    def without(self, tag: str) -> "ConditionStack":
        """アブレーション用: 指定タグを除いたスタック"""
        maps = {k: v for k, v in self.spatial_maps.items() if k != tag}
        return ConditionStack(maps, self.global_embedding)

    def select(self, indices: Sequence[int]) -> "ConditionStack":
        """バッチ化されたスタックから指定サンプルだけを取り出す"""
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        maps = {tag: (t[idx] if t.dim() == 4 else t) for tag, t in self.spatial_maps.items()}
        glob = self.global_embedding
        if glob is not None and glob.dim() == 2:
            glob = glob[idx]
        return ConditionStack(maps, glob)


# ---------------------------------------------------------------------------
# 簡易プロキシ
# ---------------------------------------------------------------------------
def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def hed_proxy(rgb: np.ndarray) -> np.ndarray:
    """Sobel 勾配強度を [0,1] に正規化したエッジマップ"""
    lum = luminance(rgb)
    magnitude = np.hypot(ndimage.sobel(lum, axis=0), ndimage.sobel(lum, axis=1))
    peak = magnitude.max()
    return magnitude / peak if peak > 0 else magnitude


def sketch_proxy(rgb: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    return (hed_proxy(rgb) > threshold).astype(np.float64)


def segmentation_proxy(rgb: np.ndarray, levels: int = 4) -> np.ndarray:
    """輝度を levels 段階に量子化し、連結成分ごとにラベル付けしたマップ（[0,1] に正規化）"""
    lum = luminance(rgb)
    span = lum.max() - lum.min()
    if span <= 0:
        return np.zeros_like(lum)
    bins = np.minimum(((lum - lum.min()) / span * levels).astype(int), levels - 1)
    labels = np.zeros(lum.shape, dtype=np.int64)
    next_label = 0
    for level in range(levels):
        component, count = ndimage.label(bins == level)
        mask = component > 0
        labels[mask] = component[mask] + next_label
        next_label += count
    return labels / max(next_label, 1)


def mlsd_proxy(rgb: np.ndarray, min_length: int = 8) -> np.ndarray:
    """スケッチエッジのうち、縦横に min_length 画素以上続く直線部分だけを残す"""
    edges = sketch_proxy(rgb) > 0
    horizontal = ndimage.binary_opening(edges, structure=np.ones((1, min_length), dtype=bool))
    vertical = ndimage.binary_opening(edges, structure=np.ones((min_length, 1), dtype=bool))
    return (horizontal | vertical).astype(np.float64)


PROXIES = {
    "hed": hed_proxy,
    "seg": segmentation_proxy,
    "sketch": sketch_proxy,
    "mlsd": mlsd_proxy,
}


def content_vector(rgb: np.ndarray) -> np.ndarray:
    """画像統計による固定長コンテンツ表現（輝度平均・輝度標準偏差・R-B 差・エッジ密度）"""
    rgb = np.asarray(rgb, dtype=np.float64)
    lum = luminance(rgb)
    return np.array([
        lum.mean(),
        lum.std(),
        (rgb[0] - rgb[2]).mean(),
        sketch_proxy(rgb).mean(),
    ])


def text_vector(category: str) -> np.ndarray:
    """カテゴリラベルの one-hot ベクトル"""
    if category not in TEXT_CATEGORIES:
        raise ValueError(f"未知のカテゴリ: {category}（対応: {', '.join(TEXT_CATEGORIES)}）")
    vec = np.zeros(len(TEXT_CATEGORIES))
    vec[TEXT_CATEGORIES.index(category)] = 1.0
    return vec


def global_embedding(content: Optional[np.ndarray] = None, category: Optional[str] = None) -> Optional[np.ndarray]:
    """テキスト one-hot とコンテンツ統計を連結（片方が無ければ 0 埋め）"""
    if content is None and category is None:
        return None
    text = text_vector(category) if category is not None else np.zeros(len(TEXT_CATEGORIES))
    stats = np.asarray(content, dtype=np.float64) if content is not None else np.zeros(CONTENT_DIM)
    return np.concatenate([text, stats])


def build_conditions(
    rgb: np.ndarray,
    tags: Sequence[str],
    category: Optional[str] = None,
    with_content: bool = False,
) -> ConditionStack:
    """RGB 画像から指定タグの条件マップをプロキシで生成"""
    maps = {}
    for tag in tags:
        if tag not in PROXIES:
            raise ValueError(f"タグ {tag} には内蔵プロキシがありません（対応: {', '.join(PROXIES)}）")
        maps[tag] = PROXIES[tag](rgb)[None]
    glob = global_embedding(content_vector(rgb) if with_content else None, category)
    return ConditionStack(maps, glob)


def stack_conditions(stacks: Sequence[ConditionStack]) -> ConditionStack:
    """画像ごとのスタックをバッチ次元で結合（全スタックが同じタグ構成であること）"""
    if not stacks:
        return ConditionStack()
    tags = stacks[0].tags
    for s in stacks:
        if s.tags != tags:
            raise ValueError(f"条件タグ構成が揃っていません: {s.tags} != {tags}")
    maps = {tag: torch.stack([s.spatial_maps[tag] for s in stacks]) for tag in tags}
    glob = None
    if stacks[0].global_embedding is not None:
        glob = torch.stack([s.global_embedding for s in stacks])
    return ConditionStack(maps, glob)
