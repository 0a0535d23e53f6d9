#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
プレビュー画像書き出しモジュール
キューブの R/G/B バンドを取り出し、チャネルごとの min-max ストレッチで
フォールスカラーの PPM（portable pixel map）として保存
"""

import re
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from hsi_data import HsiCube, RgbImage, extract_rgb


def stretch(values: np.ndarray) -> np.ndarray:
    """
    [3, H, W] をチャネルごとに [0, 255] へ線形ストレッチ

    Returns:
        [H, W, 3] の uint8 配列（定数チャネルは 0）
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros(values.shape, dtype=np.float64)
    for i, channel in enumerate(values):
        low, high = channel.min(), channel.max()
        if high > low:
            out[i] = (channel - low) / (high - low)
    return np.round(out * 255.0).astype(np.uint8).transpose(1, 2, 0)


class PreviewWriter:
    """フォールスカラーのプレビューを出力ディレクトリ配下に保存するクラス"""

    def __init__(self, out_dir: Union[str, Path], subfolder: str = "previews"):
        """
        Args:
            out_dir: 出力ディレクトリ（--out）
            subfolder: プレビュー用のサブフォルダ
        """
        self.out_dir = Path(out_dir)
        self.subfolder = subfolder

    def _get_output_dir(self) -> Path:
        output_dir = self.out_dir / self.subfolder if self.subfolder else self.out_dir
        # out_dir の外には書き出さない
        resolved = output_dir.resolve()
        if not resolved.is_relative_to(self.out_dir.resolve()):
            raise ValueError(f"サブフォルダが出力ディレクトリの外を指定しています: {self.subfolder}")
        output_dir.mkdir(parents=True, exist_ok=True)
        return output_dir

    @staticmethod
    def _sanitize_filename(name: str, max_length: int = 100) -> str:
        sanitized = re.sub(r'[\\/:*?"<>|\s]+', "_", name).strip("_")
        return sanitized[:max_length] or "preview"

    def write(self, image: Union[HsiCube, RgbImage], name: str) -> Path:
        """
        Args:
            image: キューブ（650/550/450nm に近いバンドを使用）または RGB 画像
            name: ファイル名（拡張子なし）

        Returns:
            保存した PPM のパス
        """
        rgb = extract_rgb(image) if isinstance(image, HsiCube) else image
        path = self._get_output_dir() / f"{self._sanitize_filename(name)}.ppm"
        Image.fromarray(stretch(rgb.values)).save(path, format="PPM")
        return path

    def try_write(self, image: Union[HsiCube, RgbImage], name: str) -> Optional[Path]:
        """他コマンドのおまけとして書き出す場合用: 失敗しても警告だけで続行"""
        try:
            path = self.write(image, name)
            print(f"[OK] プレビュー保存: {path}", flush=True)
            return path
        except (ValueError, OSError) as e:
            print(f"[WARNING] プレビュー保存エラー: {e}（処理は続行）", flush=True)
            return None
