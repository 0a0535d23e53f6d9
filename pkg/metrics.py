#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
評価指標モジュール
スペクトル適合率・再現率（k 近傍多様体判定）、SAM、PSNR、SSIM、フレシェ距離
"""

import concurrent.futures
import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import signal

from hsi_data import CubeFormatError, HsiCube, list_cube_files, read_cube
from numerics import RandomSource

PathLike = Union[str, Path]

# チャンク1つあたりの差分テンソル要素数（メモリ上限の目安）
CHUNK_ELEMENTS = 2 ** 22

PSNR_CAP_DB = 100.0
METRIC_COLUMNS = ("metric", "value", "k", "samples", "groups", "seed")


@dataclass(frozen=True)
class SpectralSet:
    """画素スペクトルを行とした n x B 行列"""

    profiles: np.ndarray
    source: str = "real"

    def __post_init__(self):
        profiles = np.asarray(self.profiles, dtype=np.float64)
        if profiles.ndim != 2 or profiles.shape[1] < 2:
            raise ValueError(f"スペクトル集合は n x B（B >= 2）である必要があります: {profiles.shape}")
        if profiles.shape[0] == 0:
            raise ValueError("スペクトル集合が空です")
        if not np.all(np.isfinite(profiles)):
            raise ValueError("スペクトル集合に NaN / Inf が含まれています")
        object.__setattr__(self, "profiles", profiles)

    def __len__(self) -> int:
        return self.profiles.shape[0]

    @property
    def bands(self) -> int:
        return self.profiles.shape[1]


@dataclass(frozen=True)
class SprConfig:
    k: int = 10
    sample_count: int = 100000
    group_count: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.k < 1 or self.sample_count < 1 or self.group_count < 1:
            raise ValueError("k / sample_count / group_count は 1 以上である必要があります")


# ---------------------------------------------------------------------------
# sPr / sRec
# ---------------------------------------------------------------------------
def _chunks(rows: int, cols: int, bands: int) -> List[Tuple[int, int]]:
    step = max(1, CHUNK_ELEMENTS // max(cols * bands, 1))
    return [(s, min(s + step, rows)) for s in range(0, rows, step)]


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 差の二乗和で計算する（内積展開は桁落ちで総当たりの結果とずれる）
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


def _map_chunks(fn, chunks, workers: int) -> List[np.ndarray]:
    """チャンクごとの計算をスレッドプールで実行し、チャンク順に結果を返す"""
    if workers <= 1:
        return [fn(s, e) for s, e in chunks]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(fn, s, e) for s, e in chunks]
        return [f.result() for f in futures]


def kth_neighbor_radii(points: np.ndarray, k: int, workers: int = 1) -> np.ndarray:
    """各点から自分自身（インデックス一致）を除いた k 番目の近傍までの二乗距離"""
    n = points.shape[0]
    if n <= k:
        raise ValueError(f"点数 {n} が k={k} 以下です")

    def run(start: int, end: int) -> np.ndarray:
        d = _squared_distances(points[start:end], points)
        d[np.arange(end - start), np.arange(start, end)] = np.inf
        return np.partition(d, k - 1, axis=1)[:, k - 1]

    return np.concatenate(_map_chunks(run, _chunks(n, n, points.shape[1]), workers))


def manifold_coverage(
    queries: np.ndarray, manifold: np.ndarray, radii: np.ndarray, workers: int = 1
) -> np.ndarray:
    """各クエリが少なくとも1つの多様体点の k 近傍球（境界含む）に入るか"""

    def run(start: int, end: int) -> np.ndarray:
        return np.any(_squared_distances(queries[start:end], manifold) <= radii[None, :], axis=1)

    return np.concatenate(_map_chunks(run, _chunks(queries.shape[0], manifold.shape[0], queries.shape[1]), workers))


def _sample_rows(n: int, count: int, seed: int) -> np.ndarray:
    # 実側・生成側で同じストリームを使い、同じ行数なら同じ並びにそろえる
    source = RandomSource(seed, stream=0)
    if n >= count:
        return source.choice(n, count)
    return source.permutation(n)


def spr_srec(real: SpectralSet, gen: SpectralSet, config: SprConfig = SprConfig()) -> Tuple[float, float]:
    """
    スペクトル適合率 sPr とスペクトル再現率 sRec

    両側から sample_count 行をシード固定で抽出し、group_count 個の対応するグループに分け、
    グループごとの値を平均する。各グループが k より多い行を持つようにグループ数を減らす。

    Returns:
        (sPr, sRec)
    """
    if real.bands != gen.bands:
        raise ValueError(f"バンド数が一致しません: real {real.bands}, gen {gen.bands}")
    real_rows = real.profiles[_sample_rows(len(real), config.sample_count, config.seed)]
    gen_rows = gen.profiles[_sample_rows(len(gen), config.sample_count, config.seed)]

    smallest = min(len(real_rows), len(gen_rows))
    groups = min(config.group_count, smallest // (config.k + 1))
    if groups < 1:
        raise ValueError(f"グループが小さすぎます: {smallest} 行では k={config.k} より多い行を確保できません")

    precisions, recalls = [], []
    for real_group, gen_group in zip(np.array_split(real_rows, groups), np.array_split(gen_rows, groups)):
        real_radii = kth_neighbor_radii(real_group, config.k, config.workers)
        gen_radii = kth_neighbor_radii(gen_group, config.k, config.workers)
        precisions.append(manifold_coverage(gen_group, real_group, real_radii, config.workers).mean())
        recalls.append(manifold_coverage(real_group, gen_group, gen_radii, config.workers).mean())
    return float(np.mean(precisions)), float(np.mean(recalls))


# ---------------------------------------------------------------------------
# 画像指標
# ---------------------------------------------------------------------------
def _values(x: Union[HsiCube, np.ndarray]) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, HsiCube) else x, dtype=np.float64)


def sam(a: np.ndarray, b: np.ndarray) -> float:
    """2つのスペクトルのなす角（ラジアン）"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("SAM はゼロベクトルに対して定義されません")
    return float(np.arccos(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))


def mean_sam(x: Union[HsiCube, np.ndarray], ref: Union[HsiCube, np.ndarray]) -> float:
    """画素ごとの SAM の平均"""
    xv, rv = _values(x), _values(ref)
    if xv.shape != rv.shape:
        raise ValueError(f"形状が一致しません: {xv.shape} != {rv.shape}")
    a = xv.reshape(xv.shape[0], -1)
    b = rv.reshape(rv.shape[0], -1)
    na, nb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("ゼロスペクトルの画素があるため SAM を計算できません")
    cos = np.clip(np.sum(a * b, axis=0) / (na * nb), -1.0, 1.0)
    return float(np.mean(np.arccos(cos)))


def psnr(x: Union[HsiCube, np.ndarray], ref: Union[HsiCube, np.ndarray], peak: float = 1.0) -> float:
    xv, rv = _values(x), _values(ref)
    if xv.shape != rv.shape:
        raise ValueError(f"形状が一致しません: {xv.shape} != {rv.shape}")
    mse = float(np.mean((xv - rv) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(
    x: Union[HsiCube, np.ndarray],
    ref: Union[HsiCube, np.ndarray],
    peak: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """11x11 ガウス窓（σ=1.5, valid）の SSIM をバンド平均"""
    xv, rv = _values(x), _values(ref)
    if xv.shape != rv.shape:
        raise ValueError(f"形状が一致しません: {xv.shape} != {rv.shape}")
    if xv.ndim == 2:
        xv, rv = xv[None], rv[None]
    window = gaussian_window()
    if min(xv.shape[-2:]) < window.shape[0]:
        raise ValueError(f"SSIM には {window.shape[0]} 画素以上の画像が必要です: {xv.shape[-2:]}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    def filt(img: np.ndarray) -> np.ndarray:
        return signal.convolve2d(img, window, mode="valid")

    scores = []
    for a, b in zip(xv, rv):
        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a ** 2
        var_b = filt(b * b) - mu_b ** 2
        cov = filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    """対称半正定値行列の平方根（固有値分解、微小な負の固有値は 0 に丸める）"""
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() < -1e-10 * max(1.0, abs(eigvals).max()):
        raise ValueError(f"共分散行列が半正定値ではありません（最小固有値 {eigvals.min():.3e}）")
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    2つの特徴集合（n x D）にガウス分布を当てはめたときのフレシェ距離

    tr((Σa Σb)^(1/2)) は対称行列 Σa^(1/2) Σb Σa^(1/2) の平方根のトレースとして計算する。
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"特徴次元が一致しません: {a.shape[1]} != {b.shape[1]}")
    dim = a.shape[1]
    if a.shape[0] <= dim or b.shape[0] <= dim:
        raise ValueError(f"共分散の推定にはサンプル数 n > D={dim} が必要です: {a.shape[0]}, {b.shape[0]}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("特徴に NaN / Inf が含まれています")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# 入出力
# ---------------------------------------------------------------------------
def load_spectral_set(path: PathLike, source: str = "real") -> SpectralSet:
    """
    HSC / ENVI キューブ（画素を行）、またはサイドカー JSON 付きの n x B 32bit 行列を読み込む。
    ディレクトリなら中のキューブをソート順に連結する。
    """
    path = Path(path)
    if path.suffix.lower() == ".f32":
        sidecar = path.with_suffix(".json")
        try:
            with open(sidecar, "r", encoding="utf-8") as f:
                shape = json.load(f)
            rows, cols = int(shape["rows"]), int(shape["cols"])
        except (OSError, KeyError, ValueError, TypeError) as e:
            raise CubeFormatError(f"サイドカー JSON が読めません: {sidecar} ({e})") from e
        data = np.fromfile(path, dtype="<f4")
        if data.size != rows * cols:
            raise CubeFormatError(f"データ長 {data.size} が {rows} x {cols} と一致しません: {path}")
        return SpectralSet(data.reshape(rows, cols).astype(np.float64), source)

    blocks = [read_cube(p).pixels() for p in list_cube_files(path)]
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise CubeFormatError(f"バンド数が揃っていません: {sorted(widths)}")
    return SpectralSet(np.concatenate(blocks, axis=0), source)


def evaluate_pairs(outputs: Sequence[HsiCube], references: Sequence[HsiCube]) -> Dict[str, float]:
    """対応するキューブ組の PSNR / SSIM / SAM の平均"""
    if len(outputs) != len(references) or not outputs:
        raise ValueError(f"キューブ数が一致しません: {len(outputs)} != {len(references)}")
    return {
        "psnr": float(np.mean([psnr(o, r) for o, r in zip(outputs, references)])),
        "ssim": float(np.mean([ssim(o, r) for o, r in zip(outputs, references)])),
        "sam": float(np.mean([mean_sam(o, r) for o, r in zip(outputs, references)])),
    }


def metric_rows(values: Dict[str, float], config: SprConfig) -> List[Dict]:
    return [
        {
            "metric": name,
            "value": f"{value:.10g}",
            "k": config.k,
            "samples": config.sample_count,
            "groups": config.group_count,
            "seed": config.seed,
        }
        for name, value in values.items()
    ]


def write_metrics_csv(rows: Sequence[Dict], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path
