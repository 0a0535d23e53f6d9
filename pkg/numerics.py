#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数値計算エンジン
torch をバックエンドにした float64 の密配列演算と逆伝播ユーティリティ

  - conv2d / linear / softmax / layer_norm / relu / sigmoid / bilinear_resize
  - backward と有限差分による勾配検証
  - Philox（カウンタベース）乱数による再現可能なサンプリング
"""

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# 勾配検証の精度を確保するため内部計算は常に 64bit
DTYPE = torch.float64

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float]]


class NumericalError(ArithmeticError):
    """損失や出力に NaN / Inf が現れたときに送出"""


def as_array(values: ArrayLike, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """numpy 配列・リスト・テンソルを float64 テンソルに変換"""
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def check_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"{what} に NaN / Inf が含まれています")
    return tensor


# ---------------------------------------------------------------------------
# 乱数
# ---------------------------------------------------------------------------
class RandomSource:
    """シード固定の乱数ストリーム

    numpy の Philox ビットジェネレータ（カウンタベース）を使うため、
    同じ (seed, stream) からは実行環境やスレッド数に依存せず同一の系列が得られる。
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"シードは 64bit 非負整数である必要があります: {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        self._generator = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([self.seed, self.stream]))
        )

    def spawn(self, stream: int) -> "RandomSource":
        """同じシードから独立した副ストリームを作成"""
        return RandomSource(self.seed, stream)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._generator.standard_normal(tuple(shape))

    def uniform(self, shape: Sequence[int] = ()) -> np.ndarray:
        return self._generator.random(tuple(shape))

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """重複なしで size 個のインデックスを抽出"""
        return self._generator.choice(n, size=size, replace=False)


def gaussian_sample(source: RandomSource, shape: Sequence[int]) -> torch.Tensor:
    """標準正規分布からのサンプルを float64 テンソルで返す"""
    return torch.from_numpy(source.normal(shape))


@contextlib.contextmanager
def seeded_init(seed: int):
    """モデル初期化用: torch のグローバル乱数状態を汚さずにシードを固定"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# ---------------------------------------------------------------------------
# 順伝播演算
# ---------------------------------------------------------------------------
def _with_batch(x: torch.Tensor, ndim: int) -> Tuple[torch.Tensor, bool]:
    if x.dim() == ndim:
        return x.unsqueeze(0), False
    if x.dim() == ndim + 1:
        return x, True
    raise ValueError(f"入力の次元数が不正です: {tuple(x.shape)}")


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    padding: int = 0,
) -> torch.Tensor:
    """
    2次元畳み込み（カーネル反転なしの相互相関）

    Args:
        input: [C_in, H, W] または [N, C_in, H, W]
        kernel: [C_out, C_in, k, k]（k は奇数）
        bias: [C_out]（省略可）
        padding: 0 または (k-1)/2

    Returns:
        [C_out, H', W']（バッチ入力なら先頭にバッチ次元）
    """
    if kernel.dim() != 4 or kernel.shape[-1] != kernel.shape[-2]:
        raise ValueError(f"カーネル形状が不正です: {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"カーネルサイズは奇数である必要があります: {k}")
    if padding not in (0, (k - 1) // 2):
        raise ValueError(f"padding は 0 または {(k - 1) // 2} のみ対応: {padding}")
    x, batched = _with_batch(input, 3)
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"入力チャネル数 {x.shape[1]} とカーネルの C_in {kernel.shape[1]} が一致しません"
        )
    out = F.conv2d(x, kernel, bias, padding=padding)
    return out if batched else out.squeeze(0)


def linear(input: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """最終軸に対するアフィン変換 y = x W^T + b"""
    if weight.dim() != 2 or input.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"最終軸 {input.shape[-1]} と重み {tuple(weight.shape)} の D_in が一致しません"
        )
    return F.linear(input, weight, bias)


def softmax(input: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch.softmax は内部で最大値を引いてから exp を取る
    return torch.softmax(input, dim=axis)


def relu(input: torch.Tensor) -> torch.Tensor:
    return torch.relu(input)


def sigmoid(input: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(input)


def layer_norm(
    input: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    axis: int = -3,
    eps: float = 1e-5,
) -> torch.Tensor:
    """指定軸（既定はチャネル軸）で正規化し、学習可能なスケール・シフトを掛ける"""
    moved = input.movedim(axis, -1)
    out = F.layer_norm(moved, (moved.shape[-1],), weight, bias, eps)
    return out.movedim(-1, axis)


def bilinear_resize(input: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """バイリニア補間でリサイズ（align_corners=False）"""
    x, batched = _with_batch(input, 3)
    out = F.interpolate(x, size=tuple(int(s) for s in size), mode="bilinear", align_corners=False)
    return out if batched else out.squeeze(0)


def area_downsample(input: torch.Tensor, factor: int) -> torch.Tensor:
    """整数倍の面積平均ダウンサンプル"""
    x, batched = _with_batch(input, 3)
    if x.shape[-2] % factor or x.shape[-1] % factor:
        raise ValueError(f"倍率 {factor} が画像サイズ {tuple(x.shape[-2:])} を割り切りません")
    out = F.avg_pool2d(x, factor)
    return out if batched else out.squeeze(0)


# ---------------------------------------------------------------------------
# 学習可能パラメータを持つ層
# ---------------------------------------------------------------------------
class Conv2d(nn.Module):
    """same パディングの畳み込み層（numerics.conv2d を使用）"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, zero_init: bool = False):
        super().__init__()
        self.padding = (kernel_size - 1) // 2
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(out_channels, dtype=DTYPE))
        if zero_init:
            self.zero_()
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
            nn.init.uniform_(self.bias, -bound, bound)

    def zero_(self) -> "Conv2d":
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(out_features, dtype=DTYPE))
        if zero_init:
            self.zero_()
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            bound = 1.0 / math.sqrt(in_features)
            nn.init.uniform_(self.bias, -bound, bound)

    def zero_(self) -> "Linear":
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    """チャネル軸の LayerNorm（[N, C, H, W] 用）"""

    def __init__(self, channels: int, axis: int = -3):
        super().__init__()
        self.axis = axis
        self.weight = nn.Parameter(torch.ones(channels, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.axis)


# ---------------------------------------------------------------------------
# 逆伝播
# ---------------------------------------------------------------------------
def backward(loss: torch.Tensor) -> None:
    """
    スカラー損失から到達可能な全パラメータへ勾配を累積する。
    reset_gradients を呼ばずに2回実行すると勾配は加算される。
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward はスカラー損失のみ対応: shape={tuple(loss.shape)}")
    if not loss.requires_grad:
        # 定数損失: どのパラメータにも依存しないので勾配は 0 のまま
        return
    loss.backward()


def reset_gradients(parameters: Iterable[nn.Parameter]) -> None:
    for p in parameters:
        p.grad = torch.zeros_like(p)


def gradient_of(parameter: nn.Parameter) -> torch.Tensor:
    return parameter.grad if parameter.grad is not None else torch.zeros_like(parameter)


@dataclass
class GradientCheckRecord:
    name: str
    index: int
    analytic: float
    numeric: float
    relative_error: float


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Dict[str, nn.Parameter],
    coordinates: int = 20,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> List[GradientCheckRecord]:
    """
    逆伝播の勾配を中心差分と比較する

    全パラメータの座標から重複なしで coordinates 個を抽出し、
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor) を相対誤差として記録する。

    Args:
        loss_fn: 引数なしでスカラー損失を返す関数
        parameters: 名前 → パラメータ
        coordinates: 検証する座標数
        step: 差分ステップ
        seed: 座標抽出のシード
        floor: 相対誤差の分母の下限（勾配がほぼ 0 の座標用）

    Returns:
        座標ごとの検証結果
    """
    names = list(parameters.keys())
    sizes = [parameters[n].numel() for n in names]
    total = sum(sizes)
    if total == 0:
        return []

    params = [parameters[n] for n in names]
    reset_gradients(params)
    backward(loss_fn())
    analytic = {n: gradient_of(parameters[n]).detach().clone().reshape(-1) for n in names}

    offsets = np.cumsum([0] + sizes)
    picked = RandomSource(seed).choice(total, min(coordinates, total))

    records: List[GradientCheckRecord] = []
    with torch.no_grad():
        for flat in sorted(int(i) for i in picked):
            slot = int(np.searchsorted(offsets, flat, side="right") - 1)
            name = names[slot]
            index = flat - int(offsets[slot])
            view = parameters[name].data.view(-1)
            original = view[index].item()

            view[index] = original + step
            plus = float(loss_fn())
            view[index] = original - step
            minus = float(loss_fn())
            view[index] = original

            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[name][index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            records.append(GradientCheckRecord(name, index, a, numeric, rel))
    return records
