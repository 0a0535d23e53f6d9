#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
ハイパースペクトルキューブ入出力モジュール
HSC 形式 / ENVI 形式（BSQ サブセット）の読み書き、波長アライメント、
パッチ切り出し、RGB バンド抽出、学習ペア用の劣化処理を提供
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from numerics import RandomSource

HSC_MAGIC = b"HSCUBE\x00\x01"
HSC_SUFFIX = ".hsc"

# 400-1000nm を 48 バンドで等間隔に揃える
DEFAULT_WAVELENGTHS = np.linspace(400.0, 1000.0, 48)

# R / G / B の中心波長
RGB_TARGETS_NM = (650.0, 550.0, 450.0)

ENVI_DATA_SUFFIXES = ("", ".img", ".dat", ".raw", ".bsq")

PathLike = Union[str, Path]


class CubeFormatError(ValueError):
    """HSC / ENVI ファイルのヘッダやペイロードが不正"""


@dataclass(frozen=True)
class HsiCube:
    """
    反射率キューブ（band-sequential: [bands, height, width]）

    読み込み後は不変として扱う。meta には出所やフラグなどの付帯情報を保持し、
    HSC ヘッダの "meta" として往復する。
    """

    values: np.ndarray
    wavelengths: np.ndarray
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values)
        wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"キューブは [bands, height, width] の3次元である必要があります: {values.shape}")
        if wavelengths.ndim != 1 or wavelengths.shape[0] != values.shape[0]:
            raise ValueError(
                f"波長数 {wavelengths.size} とバンド数 {values.shape[0]} が一致しません"
            )
        if wavelengths.size > 1 and not np.all(np.diff(wavelengths) > 0):
            raise ValueError("波長は狭義単調増加である必要があります")
        if not np.all(np.isfinite(values)):
            raise ValueError("キューブに NaN / Inf が含まれています")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "wavelengths", wavelengths)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def with_values(
        self,
        values: np.ndarray,
        wavelengths: Optional[np.ndarray] = None,
        meta: Optional[Dict] = None,
    ) -> "HsiCube":
        merged = dict(self.meta)
        if meta:
            merged.update(meta)
        return HsiCube(values, self.wavelengths if wavelengths is None else wavelengths, merged)

    def pixels(self) -> np.ndarray:
        """画素を行とした [height*width, bands] 行列"""
        return self.values.reshape(self.bands, -1).T

    @classmethod
    def from_array(cls, values: np.ndarray, wavelengths: Sequence[float], meta: Optional[Dict] = None) -> "HsiCube":
        """整数型の入力はキューブ内最大値で [0,1] に正規化してから取り込む"""
        values = np.asarray(values)
        if np.issubdtype(values.dtype, np.integer):
            peak = values.max() if values.size else 0
            values = values.astype(np.float64) / peak if peak > 0 else values.astype(np.float64)
        return cls(values, np.asarray(wavelengths, dtype=np.float64), dict(meta or {}))


@dataclass(frozen=True)
class RgbImage:
    """R/G/B 順の3バンド画像と、選ばれた元バンドのインデックス"""

    values: np.ndarray
    band_indices: Tuple[int, int, int] = (-1, -1, -1)
    wavelengths: Tuple[float, float, float] = RGB_TARGETS_NM

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def to_cube(self, meta: Optional[Dict] = None) -> HsiCube:
        # HsiCube は波長昇順なので B, G, R の順に格納する
        info = {"rgb_band_indices": list(self.band_indices)}
        info.update(meta or {})
        return HsiCube(self.values[::-1].copy(), np.asarray(self.wavelengths[::-1]), info)

    @classmethod
    def from_cube(cls, cube: HsiCube) -> "RgbImage":
        if cube.bands != 3:
            raise ValueError(f"RGB 画像は3バンドである必要があります: {cube.bands}")
        indices = tuple(cube.meta.get("rgb_band_indices", (-1, -1, -1)))
        return cls(cube.values[::-1].copy(), indices, tuple(float(w) for w in cube.wavelengths[::-1]))


# ---------------------------------------------------------------------------
# 入出力
# ---------------------------------------------------------------------------
def write_cube(cube: HsiCube, path: PathLike) -> Path:
    """
    HSC 形式で保存

    ヘッダはキー順ソート・区切り最小の JSON で書き出すため、同じキューブからは
    常にバイト単位で同一のファイルが得られる。
    """
    path = Path(path)
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "wavelengths_nm": [float(w) for w in cube.wavelengths],
        "dtype": "f32le",
        "layout": "bsq",
    }
    if cube.meta:
        header["meta"] = cube.meta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    payload = np.ascontiguousarray(cube.values, dtype="<f4").tobytes()

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HSC_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)
    return path


def read_cube(path: PathLike) -> HsiCube:
    """HSC ファイル、または ENVI ヘッダ（.hdr）からキューブを読み込む"""
    path = Path(path)
    if path.suffix.lower() == ".hdr":
        return _read_envi(path)
    return _read_hsc(path)


def _read_hsc(path: Path) -> HsiCube:
    with open(path, "rb") as f:
        raw = f.read()

    if raw[: len(HSC_MAGIC)] != HSC_MAGIC:
        raise CubeFormatError(f"HSC マジックが不正です: {path}")
    offset = len(HSC_MAGIC)
    if len(raw) < offset + 4:
        raise CubeFormatError(f"ヘッダ長が読み取れません: {path}")
    (header_len,) = struct.unpack("<I", raw[offset: offset + 4])
    offset += 4
    try:
        header = json.loads(raw[offset: offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CubeFormatError(f"ヘッダ JSON が不正です: {path}: {e}")
    offset += header_len

    for key in ("height", "width", "bands", "wavelengths_nm", "dtype", "layout"):
        if key not in header:
            raise CubeFormatError(f"ヘッダに {key} がありません: {path}")
    if header["dtype"] != "f32le" or header["layout"] != "bsq":
        raise CubeFormatError(f"未対応の dtype/layout: {header['dtype']}/{header['layout']}")

    bands, height, width = int(header["bands"]), int(header["height"]), int(header["width"])
    wavelengths = header["wavelengths_nm"]
    if len(wavelengths) != bands:
        raise CubeFormatError(f"bands={bands} に対して波長が {len(wavelengths)} 個です: {path}")

    expected = bands * height * width * 4
    if len(raw) - offset != expected:
        raise CubeFormatError(
            f"ペイロード長 {len(raw) - offset} バイトが宣言形状 ({bands}, {height}, {width}) と一致しません"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(bands, height, width).astype(np.float32)
    try:
        return HsiCube(values, np.asarray(wavelengths, dtype=np.float64), header.get("meta", {}))
    except ValueError as e:
        raise CubeFormatError(f"{path}: {e}")


def _read_envi(header_path: Path) -> HsiCube:
    """ENVI ヘッダのサブセット（bsq / data type 4 / byte order 0）のみ対応"""
    import spectral.io.envi as envi

    try:
        meta = envi.read_envi_header(str(header_path))
    except Exception as e:
        raise CubeFormatError(f"ENVI ヘッダが読み込めません: {header_path}: {e}")

    for key in ("samples", "lines", "bands", "wavelength"):
        if key not in meta:
            raise CubeFormatError(f"ENVI ヘッダに {key} がありません: {header_path}")
    interleave = str(meta.get("interleave", "bsq")).strip().lower()
    if interleave != "bsq":
        raise CubeFormatError(f"interleave = {interleave} は未対応です（bsq のみ）")
    if str(meta.get("data type", "")).strip() != "4":
        raise CubeFormatError(f"data type = {meta.get('data type')} は未対応です（4 のみ）")
    if str(meta.get("byte order", "0")).strip() != "0":
        raise CubeFormatError(f"byte order = {meta.get('byte order')} は未対応です（0 のみ）")

    samples, lines, bands = int(meta["samples"]), int(meta["lines"]), int(meta["bands"])
    wavelengths = np.asarray([float(w) for w in meta["wavelength"]], dtype=np.float64)
    if wavelengths.size != bands:
        raise CubeFormatError(f"bands={bands} に対して波長が {wavelengths.size} 個です: {header_path}")
    units = str(meta.get("wavelength units", "nanometers")).lower()
    if units.startswith("micro") or units == "um":
        wavelengths = wavelengths * 1000.0

    data_path = None
    for suffix in ENVI_DATA_SUFFIXES:
        candidate = header_path.with_suffix(suffix)
        if candidate.exists() and candidate != header_path:
            data_path = candidate
            break
    if data_path is None:
        raise CubeFormatError(f"ENVI データファイルが見つかりません: {header_path}")

    offset = int(meta.get("header offset", 0))
    expected = samples * lines * bands * 4
    if os.path.getsize(data_path) - offset != expected:
        raise CubeFormatError(
            f"データ長が宣言形状 ({bands}, {lines}, {samples}) と一致しません: {data_path}"
        )

    try:
        image = envi.open(str(header_path), str(data_path)).load()
    except Exception as e:
        raise CubeFormatError(f"ENVI データが読み込めません: {data_path}: {e}")
    values = np.transpose(np.asarray(image, dtype=np.float32), (2, 0, 1))
    return HsiCube.from_array(values, wavelengths, {"source": header_path.stem})


# ---------------------------------------------------------------------------
# 波長アライメント
# ---------------------------------------------------------------------------
def align_wavelengths(cube: HsiCube, target: Optional[Sequence[float]] = None) -> HsiCube:
    """
    画素ごとの区分線形補間で目標波長グリッドに揃える

    Args:
        cube: 入力キューブ
        target: 目標波長（nm）。省略時は 400-1000nm / 48 バンド

    Returns:
        目標グリッド上のキューブ（外挿はしない）
    """
    grid = DEFAULT_WAVELENGTHS if target is None else np.asarray(target, dtype=np.float64)
    source = cube.wavelengths
    if grid.size == 0:
        raise ValueError("目標波長が空です")
    if grid.min() < source[0] or grid.max() > source[-1]:
        raise ValueError(
            f"目標波長 {grid.min():.2f}-{grid.max():.2f}nm が元の範囲 "
            f"{source[0]:.2f}-{source[-1]:.2f}nm の外にあります"
        )
    values = cube.values.astype(np.float64)
    if source.size == 1:
        return cube.with_values(np.repeat(values, grid.size, axis=0), grid)

    lower = np.clip(np.searchsorted(source, grid, side="right") - 1, 0, source.size - 2)
    weight = (grid - source[lower]) / (source[lower + 1] - source[lower])
    w = weight[:, None, None]
    aligned = (1.0 - w) * values[lower] + w * values[lower + 1]
    return cube.with_values(aligned, grid)


def align_to_default_grid(cube: HsiCube, grid: Optional[Sequence[float]] = None) -> HsiCube:
    """元の波長範囲がカバーする部分グリッドにだけ揃え、欠けがあれば partial_coverage を立てる"""
    grid = DEFAULT_WAVELENGTHS if grid is None else np.asarray(grid, dtype=np.float64)
    covered = grid[(grid >= cube.wavelengths[0]) & (grid <= cube.wavelengths[-1])]
    if covered.size == 0:
        raise ValueError(
            f"波長範囲 {cube.wavelengths[0]:.1f}-{cube.wavelengths[-1]:.1f}nm が目標グリッドと重なりません"
        )
    aligned = align_wavelengths(cube, covered)
    if covered.size < grid.size:
        return aligned.with_values(aligned.values, meta={"partial_coverage": True})
    return aligned


# ---------------------------------------------------------------------------
# パッチ切り出し
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    origins: Tuple[Tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.origins)


def patch_grid(height: int, width: int, size: int, stride: int) -> PatchGrid:
    """パディングなしのパッチ原点を行優先で列挙"""
    if size <= 0 or stride <= 0:
        raise ValueError(f"size / stride は正の整数である必要があります: {size}, {stride}")
    if size > min(height, width):
        raise ValueError(f"パッチサイズ {size} が画像サイズ {height}x{width} を超えています")
    rows = range(0, height - size + 1, stride)
    cols = range(0, width - size + 1, stride)
    return PatchGrid(size, stride, tuple((r, c) for r in rows for c in cols))


def crop_patches(cube: HsiCube, size: int, stride: int) -> Tuple[PatchGrid, List[HsiCube]]:
    grid = patch_grid(cube.height, cube.width, size, stride)
    patches = [
        cube.with_values(
            cube.values[:, r: r + size, c: c + size],
            meta={"origin": [r, c]},
        )
        for r, c in grid.origins
    ]
    return grid, patches


def reassemble_patches(grid: PatchGrid, patches: Sequence[HsiCube]) -> np.ndarray:
    """パッチを原点位置に書き戻し、カバーされた領域を復元"""
    if len(patches) != len(grid):
        raise ValueError(f"パッチ数 {len(patches)} がグリッド {len(grid)} と一致しません")
    size = grid.patch_size
    height = max(r for r, _ in grid.origins) + size
    width = max(c for _, c in grid.origins) + size
    out = np.zeros((patches[0].bands, height, width), dtype=patches[0].values.dtype)
    for (r, c), patch in zip(grid.origins, patches):
        out[:, r: r + size, c: c + size] = patch.values
    return out


# ---------------------------------------------------------------------------
# RGB バンド抽出
# ---------------------------------------------------------------------------
def nearest_band(wavelengths: np.ndarray, target: float) -> int:
    # argmin は最初の最小値を返すので、等距離なら小さいインデックスが選ばれる
    return int(np.argmin(np.abs(wavelengths - target)))


def extract_rgb(cube: HsiCube, targets: Sequence[float] = RGB_TARGETS_NM) -> RgbImage:
    """650/550/450nm に最も近いバンドを R/G/B として取り出す"""
    low, high = min(targets), max(targets)
    if cube.wavelengths[0] > low or cube.wavelengths[-1] < high:
        raise ValueError(
            f"波長範囲 {cube.wavelengths[0]:.1f}-{cube.wavelengths[-1]:.1f}nm が "
            f"{low:.0f}-{high:.0f}nm をカバーしていません"
        )
    indices = tuple(nearest_band(cube.wavelengths, t) for t in targets)
    values = np.stack([cube.values[i] for i in indices]).astype(np.float64)
    return RgbImage(values, indices, tuple(float(cube.wavelengths[i]) for i in indices))


# ---------------------------------------------------------------------------
# 劣化処理
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    sigma: float = 0.0
    factor: int = 2
    seed: int = 0
    clip: bool = True

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "downsample"):
            raise ValueError(f"未対応の劣化種別: {self.kind}")
        if self.sigma < 0:
            raise ValueError(f"sigma は 0 以上である必要があります: {self.sigma}")
        if self.factor not in (2, 4):
            raise ValueError(f"factor は 2 または 4 のみ対応: {self.factor}")


def degrade(cube: HsiCube, spec: DegradationSpec) -> HsiCube:
    """
    ガウスノイズ付加（シード固定）または面積平均ダウンサンプル

    ノイズ付加後は clip=True のとき [0,1] にクランプする。
    """
    if spec.kind == "gaussian_noise":
        if spec.sigma == 0:
            return cube
        noise = RandomSource(spec.seed).normal(cube.values.shape) * spec.sigma
        noisy = cube.values.astype(np.float64) + noise
        if spec.clip:
            noisy = np.clip(noisy, 0.0, 1.0)
        return cube.with_values(noisy, meta={"degradation": f"gaussian_noise:{spec.sigma}:{spec.seed}"})

    f = spec.factor
    if cube.height % f or cube.width % f:
        raise ValueError(f"倍率 {f} が画像サイズ {cube.height}x{cube.width} を割り切りません")
    values = cube.values.astype(np.float64)
    reduced = values.reshape(cube.bands, cube.height // f, f, cube.width // f, f).mean(axis=(2, 4))
    return cube.with_values(reduced, meta={"degradation": f"downsample:{f}"})


def list_cube_files(path: PathLike) -> List[Path]:
    """ファイルならそのまま、ディレクトリなら .hsc / .hdr をソート順で列挙"""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"入力が見つかりません: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (HSC_SUFFIX, ".hdr"))
    if not files:
        raise FileNotFoundError(f"キューブファイルがありません: {path}")
    return files
