#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
RGB ガイド付き超解像モジュール（Rectangular Guided Attention Network）

  - 矩形窓の分割 / 復元
  - 矩形クロスアテンション（水平窓・垂直窓の2系統、マルチヘッド）
  - ガイド付きアテンション層（SAL → CAL → SpecAL → FFD、各サブ層に残差接続）
  - 低解像度 HSI + 高解像度 RGB からの高解像度 HSI 推定と L1 学習
"""

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from checkpoint import load_checkpoint, save_checkpoint
from hsi_data import DegradationSpec, HsiCube, RgbImage, degrade, extract_rgb
from numerics import (
    DTYPE,
    Conv2d,
    LayerNorm,
    Linear,
    NumericalError,
    RandomSource,
    as_array,
    backward,
    bilinear_resize,
    check_finite,
    conv2d,
    relu,
    seeded_init,
    sigmoid,
    softmax,
)

AttentionHook = Callable[[torch.Tensor], None]


@dataclass(frozen=True)
class AttentionConfig:
    """
    Args:
        channels: 特徴チャネル数 C（偶数、2*heads で割り切れること）
        heads: ヘッド数
        window_h: 水平窓 [h, w]（w >= h）
        window_v: 垂直窓 [h, w]（h >= w）
        layers: GAL の段数
        qkv_kernel: Q/K/V 射影の畳み込みカーネルサイズ
        ffd_expansion: FFD の中間層倍率
        reduction: SpecAL の縮約率
    """

    channels: int = 8
    heads: int = 1
    window_h: Tuple[int, int] = (2, 8)
    window_v: Tuple[int, int] = (8, 2)
    layers: int = 2
    qkv_kernel: int = 3
    ffd_expansion: int = 2
    reduction: int = 2

    def __post_init__(self):
        object.__setattr__(self, "window_h", tuple(int(v) for v in self.window_h))
        object.__setattr__(self, "window_v", tuple(int(v) for v in self.window_v))
        if self.channels <= 0 or self.channels % 2:
            raise ValueError(f"チャネル数 C は正の偶数である必要があります: {self.channels}")
        if self.heads < 1 or self.channels % (2 * self.heads):
            raise ValueError(f"C={self.channels} が 2*heads={2 * self.heads} で割り切れません")
        if min(self.window_h + self.window_v) < 1:
            raise ValueError("窓サイズは 1 以上である必要があります")
        if self.window_h[1] < self.window_h[0]:
            raise ValueError(f"水平窓は幅 >= 高さである必要があります: {self.window_h}")
        if self.window_v[0] < self.window_v[1]:
            raise ValueError(f"垂直窓は高さ >= 幅である必要があります: {self.window_v}")
        if self.layers < 0 or self.qkv_kernel % 2 == 0:
            raise ValueError("layers は 0 以上、qkv_kernel は奇数である必要があります")

    @property
    def head_dim(self) -> int:
        return self.channels // (2 * self.heads)

    def multiple(self) -> Tuple[int, int]:
        """特徴マップの縦横が満たすべき倍数"""
        mh = self.window_h[0] * self.window_v[0] // math.gcd(self.window_h[0], self.window_v[0])
        mw = self.window_h[1] * self.window_v[1] // math.gcd(self.window_h[1], self.window_v[1])
        return mh, mw

    def check_extents(self, height: int, width: int) -> None:
        for h, w in (self.window_h, self.window_v):
            if height % h or width % w:
                raise ValueError(f"特徴マップ {height}x{width} が窓 [{h}, {w}] で割り切れません")

    @classmethod
    def from_dict(cls, data: dict) -> "AttentionConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# 窓分割
# ---------------------------------------------------------------------------
@dataclass
class WindowedFeatures:
    """windows: [窓数, h*w, C']。復元に必要な元の形状を保持する"""

    windows: torch.Tensor
    window: Tuple[int, int]
    batch: int
    height: int
    width: int
    batched: bool

    @property
    def count(self) -> int:
        return self.windows.shape[0]


def partition_windows(features: torch.Tensor, window: Sequence[int]) -> WindowedFeatures:
    """特徴マップを重複のない矩形窓に行優先で分割"""
    h, w = int(window[0]), int(window[1])
    batched = features.dim() == 4
    x = features if batched else features.unsqueeze(0)
    n, c, height, width = x.shape
    if height % h or width % w:
        raise ValueError(f"特徴マップ {height}x{width} が窓 [{h}, {w}] で割り切れません")
    x = x.reshape(n, c, height // h, h, width // w, w).permute(0, 2, 4, 3, 5, 1)
    return WindowedFeatures(x.reshape(-1, h * w, c), (h, w), n, height, width, batched)


def reverse_windows(features: WindowedFeatures) -> torch.Tensor:
    h, w = features.window
    c = features.windows.shape[-1]
    x = features.windows.reshape(features.batch, features.height // h, features.width // w, h, w, c)
    x = x.permute(0, 5, 1, 3, 2, 4).reshape(features.batch, c, features.height, features.width)
    return x if features.batched else x.squeeze(0)


# ---------------------------------------------------------------------------
# 矩形クロスアテンション
# ---------------------------------------------------------------------------
class RcaWeights(NamedTuple):
    qkv1_weight: torch.Tensor
    qkv1_bias: Optional[torch.Tensor]
    qkv2_weight: torch.Tensor
    qkv2_bias: Optional[torch.Tensor]
    pos_h: Optional[torch.Tensor]
    pos_v: Optional[torch.Tensor]


def project_qkv(
    z: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """1回の畳み込みで 3C チャネルを作り Q / K / V に分割"""
    channels = z.shape[-3]
    if channels % 2:
        raise ValueError(f"チャネル数 C は偶数である必要があります: {channels}")
    if weight.shape[0] != 3 * channels:
        raise ValueError(f"Q/K/V 射影の出力は 3C={3 * channels} である必要があります: {weight.shape[0]}")
    qkv = conv2d(z, weight, bias, padding=(weight.shape[-1] - 1) // 2)
    q, k, v = torch.chunk(qkv, 3, dim=-3)
    return q, k, v


def spectral_split(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """チャネルを前半（水平窓用）と後半（垂直窓用）に分ける"""
    half = x.shape[-3] // 2
    return x[..., :half, :, :], x[..., half:, :, :]


def window_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    window: Sequence[int],
    heads: int,
    position: Optional[torch.Tensor] = None,
    hook: Optional[AttentionHook] = None,
) -> torch.Tensor:
    """窓ごとのマルチヘッドアテンション SoftMax(QK^T/sqrt(d) + P) V"""
    qw = partition_windows(query, window)
    kw = partition_windows(key, window).windows
    vw = partition_windows(value, window).windows
    count, tokens, channels = qw.windows.shape
    if channels % heads:
        raise ValueError(f"チャネル {channels} がヘッド数 {heads} で割り切れません")
    d = channels // heads

    def heads_first(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(count, tokens, heads, d).transpose(1, 2)

    logits = heads_first(qw.windows) @ heads_first(kw).transpose(-2, -1) / math.sqrt(d)
    if position is not None:
        logits = logits + position
    attn = softmax(logits, axis=-1)
    if hook is not None:
        hook(attn)
    out = (attn @ heads_first(vw)).transpose(1, 2).reshape(count, tokens, channels)
    return reverse_windows(replace(qw, windows=out))


def rca_forward(
    z1: torch.Tensor,
    z2: torch.Tensor,
    config: AttentionConfig,
    weights: RcaWeights,
    hook: Optional[AttentionHook] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    矩形クロスアテンション

    Z1 側の出力は Z2 のクエリで Z1 のキー・値を参照し、Z2 側はその逆。
    チャネル前半は水平窓、後半は垂直窓で計算し、最後に連結する（残差なし）。
    """
    if z1.shape != z2.shape:
        raise ValueError(f"2入力の形状が一致しません: {tuple(z1.shape)} != {tuple(z2.shape)}")
    config.check_extents(z1.shape[-2], z1.shape[-1])

    q1, k1, v1 = project_qkv(z1, weights.qkv1_weight, weights.qkv1_bias)
    if z2 is z1 and weights.qkv2_weight is weights.qkv1_weight:
        q2, k2, v2 = q1, k1, v1
    else:
        q2, k2, v2 = project_qkv(z2, weights.qkv2_weight, weights.qkv2_bias)

    branches = (
        (0, config.window_h, weights.pos_h),
        (1, config.window_v, weights.pos_v),
    )
    out1, out2 = [], []
    for part, window, position in branches:
        out1.append(window_attention(
            spectral_split(q2)[part], spectral_split(k1)[part], spectral_split(v1)[part],
            window, config.heads, position, hook,
        ))
        out2.append(window_attention(
            spectral_split(q1)[part], spectral_split(k2)[part], spectral_split(v2)[part],
            window, config.heads, position, hook,
        ))
    return torch.cat(out1, dim=-3), torch.cat(out2, dim=-3)


class RectangularCrossAttention(nn.Module):
    """RCA の重み保持モジュール。shared=True なら両入力で同じ射影を使う（SAL 用）"""

    def __init__(self, config: AttentionConfig, shared: bool = False):
        super().__init__()
        self.config = config
        c = config.channels
        self.qkv1 = Conv2d(c, 3 * c, config.qkv_kernel)
        self.qkv2 = None if shared else Conv2d(c, 3 * c, config.qkv_kernel)
        tokens_h = config.window_h[0] * config.window_h[1]
        tokens_v = config.window_v[0] * config.window_v[1]
        # 位置埋め込みはヘッドごと・全窓共有・ゼロ初期化
        self.pos_h = nn.Parameter(torch.zeros(config.heads, tokens_h, tokens_h, dtype=DTYPE))
        self.pos_v = nn.Parameter(torch.zeros(config.heads, tokens_v, tokens_v, dtype=DTYPE))

    @property
    def weights(self) -> RcaWeights:
        second = self.qkv1 if self.qkv2 is None else self.qkv2
        return RcaWeights(
            self.qkv1.weight, self.qkv1.bias, second.weight, second.bias, self.pos_h, self.pos_v
        )

    def forward(self, z1, z2, hook: Optional[AttentionHook] = None):
        return rca_forward(z1, z2, self.config, self.weights, hook)


# ---------------------------------------------------------------------------
# ガイド付きアテンション層
# ---------------------------------------------------------------------------
class SpectralAttention(nn.Module):
    """SpecAL: 空間平均 → Linear → ReLU → Linear → sigmoid のゲートで射影特徴をチャネルごとに重み付け"""

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        hidden = max(channels // reduction, 1)
        # 全重みゼロで出力ゼロ（GAL が恒等）になるよう 1x1 射影にゲートを掛ける
        self.proj = Conv2d(channels, channels, 1)
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = sigmoid(self.fc2(relu(self.fc1(x.mean(dim=(-2, -1))))))
        return self.proj(x) * gate[..., None, None]


class FeedForward(nn.Module):
    """FFD: 正規化 + 2層の線形変換（間に ReLU）"""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.fc1 = Linear(channels, channels * expansion)
        self.fc2 = Linear(channels * expansion, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x).movedim(-3, -1)
        return self.fc2(relu(self.fc1(y))).movedim(-1, -3)


class GuidedAttentionLayer(nn.Module):
    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.sal_hsi = RectangularCrossAttention(config, shared=True)
        self.sal_rgb = RectangularCrossAttention(config, shared=True)
        self.cal = RectangularCrossAttention(config)
        self.spec_hsi = SpectralAttention(config.channels, config.reduction)
        self.spec_rgb = SpectralAttention(config.channels, config.reduction)
        self.ffd_hsi = FeedForward(config.channels, config.ffd_expansion)
        self.ffd_rgb = FeedForward(config.channels, config.ffd_expansion)

    def forward(self, hsi, rgb, hook: Optional[AttentionHook] = None):
        hsi = hsi + self.sal_hsi(hsi, hsi, hook)[0]
        rgb = rgb + self.sal_rgb(rgb, rgb, hook)[0]
        # HSI 側には HSI 由来の値 V を RGB のクエリで集約した出力を足す
        hsi_hat, rgb_hat = self.cal(hsi, rgb, hook)
        hsi, rgb = hsi + hsi_hat, rgb + rgb_hat
        hsi = hsi + self.spec_hsi(hsi)
        rgb = rgb + self.spec_rgb(rgb)
        hsi = hsi + self.ffd_hsi(hsi)
        rgb = rgb + self.ffd_rgb(rgb)
        return hsi, rgb


def gal_forward(hsi_feat, rgb_feat, layer: GuidedAttentionLayer, hook: Optional[AttentionHook] = None):
    if hsi_feat.shape != rgb_feat.shape:
        raise ValueError(f"HSI / RGB 特徴の形状が一致しません: {tuple(hsi_feat.shape)} != {tuple(rgb_feat.shape)}")
    return layer(hsi_feat, rgb_feat, hook)


# ---------------------------------------------------------------------------
# RGAN
# ---------------------------------------------------------------------------
class RGAN(nn.Module):
    """
    浅い畳み込みで各モダリティを埋め込み、低解像度側はバイリニアで高解像度に揃えてから
    GAL を積み重ね、最終畳み込みで B バンドに戻す。最終畳み込みはゼロ初期化なので
    初期状態の出力はバイリニア拡大そのものになる。
    """

    def __init__(self, bands: int, config: Optional[AttentionConfig] = None, scale: int = 2, seed: int = 0):
        super().__init__()
        if scale not in (2, 4):
            raise ValueError(f"倍率は 2 または 4 のみ対応: {scale}")
        self.bands = bands
        self.scale = scale
        self.seed = seed
        self.config = config or AttentionConfig()
        c = self.config.channels
        with seeded_init(seed):
            self.embed_hsi = Conv2d(bands, c, 3)
            self.embed_rgb = Conv2d(3, c, 3)
            self.layers = nn.ModuleList(GuidedAttentionLayer(self.config) for _ in range(self.config.layers))
            self.head = Conv2d(c, bands, 3, zero_init=True)

    def model_config(self) -> dict:
        return {"bands": self.bands, "scale": self.scale, "seed": self.seed, "attention": asdict(self.config)}

    def forward(self, lr: torch.Tensor, rgb: torch.Tensor, hook: Optional[AttentionHook] = None) -> torch.Tensor:
        """
        Args:
            lr: [N, B, h, w] 低解像度 HSI
            rgb: [N, 3, h*s, w*s] 高解像度 RGB

        Returns:
            [N, B, h*s, w*s]（クランプなし）
        """
        hr_size = (lr.shape[-2] * self.scale, lr.shape[-1] * self.scale)
        if tuple(rgb.shape[-2:]) != hr_size:
            raise ValueError(
                f"RGB サイズ {tuple(rgb.shape[-2:])} が低解像度 {tuple(lr.shape[-2:])} x{self.scale} と一致しません"
            )
        self.config.check_extents(*hr_size)
        up = bilinear_resize(lr, hr_size)
        hsi = self.embed_hsi(up)
        guide = self.embed_rgb(rgb)
        for layer in self.layers:
            hsi, guide = gal_forward(hsi, guide, layer, hook)
        return up + self.head(hsi)


def _pad_amount(extent: int, scale: int, multiple: int) -> int:
    for pad in range(multiple + 1):
        if ((extent + pad) * scale) % multiple == 0:
            return pad
    return multiple


def rgan_forward(
    lr_hsi: HsiCube,
    hr_rgb: Union[RgbImage, np.ndarray],
    model: RGAN,
    guidance: bool = True,
    hook: Optional[AttentionHook] = None,
) -> HsiCube:
    """
    推論: 窓サイズの倍数に満たない場合は反射パディングしてから推定し、元の範囲を切り出す。
    出力は [0,1] にクランプする。guidance=False なら RGB 入力をゼロにする。
    """
    rgb = hr_rgb.values if isinstance(hr_rgb, RgbImage) else np.asarray(hr_rgb)
    if lr_hsi.bands != model.bands:
        raise ValueError(f"バンド数 {lr_hsi.bands} がモデルの {model.bands} と一致しません")
    s = model.scale
    height, width = lr_hsi.height * s, lr_hsi.width * s
    if rgb.shape != (3, height, width):
        raise ValueError(f"RGB 形状 {rgb.shape} が (3, {height}, {width}) と一致しません（倍率 x{s}）")

    lr = as_array(lr_hsi.values).unsqueeze(0)
    guide = as_array(rgb).unsqueeze(0)
    if not guidance:
        guide = torch.zeros_like(guide)

    mh, mw = model.config.multiple()
    pad_h = _pad_amount(lr_hsi.height, s, mh)
    pad_w = _pad_amount(lr_hsi.width, s, mw)
    if pad_h or pad_w:
        if pad_h >= lr_hsi.height or pad_w >= lr_hsi.width:
            raise ValueError(f"画像 {lr_hsi.height}x{lr_hsi.width} が小さすぎて窓サイズに合わせられません")
        lr = F.pad(lr, (0, pad_w, 0, pad_h), mode="reflect")
        guide = F.pad(guide, (0, pad_w * s, 0, pad_h * s), mode="reflect")

    with torch.no_grad():
        out = model(lr, guide, hook)
    out = check_finite(out[..., :height, :width], "RGAN 出力").clamp(0.0, 1.0)
    return lr_hsi.with_values(out[0].numpy(), meta={"sr_scale": s})


# ---------------------------------------------------------------------------
# 学習
# ---------------------------------------------------------------------------
@dataclass
class TrainingPair:
    lr: np.ndarray
    rgb: np.ndarray
    hr: np.ndarray


def make_training_pairs(cubes: Sequence[HsiCube], scale: int) -> List[TrainingPair]:
    """高解像度キューブを面積平均で縮小し (低解像度 HSI, 高解像度 RGB, 正解) の組を作る"""
    pairs = []
    for cube in cubes:
        lr = degrade(cube, DegradationSpec("downsample", factor=scale))
        pairs.append(TrainingPair(lr.values, extract_rgb(cube).values, cube.values))
    return pairs


@dataclass
class RganTrainConfig:
    steps: int = 200
    lr: float = 1e-4
    lr_min: float = 1e-5
    batch_size: int = 2
    weight_decay: float = 1e-2
    seed: int = 0
    guidance: bool = True


@dataclass
class TrainResult:
    model: nn.Module
    losses: List[float]


def rgan_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.l1_loss(prediction, target)


def train_rgan(pairs: Sequence[TrainingPair], model: RGAN, config: Optional[RganTrainConfig] = None) -> TrainResult:
    """
    AdamW + コサインアニーリング（lr → lr_min）で L1 損失を最小化

    Returns:
        学習済みモデルとステップごとの損失
    """
    config = config or RganTrainConfig()
    if not pairs:
        raise ValueError("学習ペアが空です")
    shapes = {(p.lr.shape, p.rgb.shape, p.hr.shape) for p in pairs}
    if len(shapes) != 1:
        raise ValueError(f"学習ペアの形状が揃っていません: {sorted(shapes)}")

    lr = torch.stack([as_array(p.lr) for p in pairs])
    rgb = torch.stack([as_array(p.rgb) for p in pairs])
    hr = torch.stack([as_array(p.hr) for p in pairs])
    if not config.guidance:
        rgb = torch.zeros_like(rgb)

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(config.steps, 1), eta_min=config.lr_min
    )
    rng = RandomSource(config.seed, stream=1)
    batch = min(config.batch_size, len(pairs))
    report_every = max(config.steps // 10, 1)

    print(f"[INFO] RGAN 学習開始: ペア数 {len(pairs)}, ステップ数 {config.steps}, バッチ {batch}", flush=True)
    losses: List[float] = []
    model.train()
    for step in range(config.steps):
        idx = torch.as_tensor(rng.integers(0, len(pairs), batch), dtype=torch.long)
        optimizer.zero_grad()
        loss = rgan_loss(model(lr[idx], rgb[idx]), hr[idx])
        if not torch.isfinite(loss):
            raise NumericalError(
                f"RGAN 学習の損失が NaN / Inf になりました (step {step}, lr {scheduler.get_last_lr()[0]:.2e})"
            )
        backward(loss)
        optimizer.step()
        scheduler.step()
        losses.append(loss.item())
        if (step + 1) % report_every == 0 or step + 1 == config.steps:
            print(f"[PROGRESS] RGAN 学習: {int((step + 1) / config.steps * 100)}% (L1 {losses[-1]:.6f})", flush=True)
    model.eval()

    if losses:
        print(f"[OK] RGAN 学習完了: L1 {losses[0]:.6f} → {losses[-1]:.6f}", flush=True)
    return TrainResult(model, losses)


def save_rgan(model: RGAN, path: Union[str, Path]) -> Path:
    return save_checkpoint(model, "rgan", model.model_config(), path)


def load_rgan(path: Union[str, Path]) -> RGAN:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "rgan":
        raise ValueError(f"RGAN のチェックポイントではありません: {ckpt.kind}")
    cfg = ckpt.config
    model = RGAN(cfg["bands"], AttentionConfig.from_dict(cfg["attention"]), cfg["scale"], cfg.get("seed", 0))
    model.load_state_dict(ckpt.state)
    model.eval()
    return model
