#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
潜在拡散モジュール

  - 線形 β スケジュールと閉形式の順方向ノイズ付加
  - 決定的 DDIM（η=0）サンプリング
  - 3段エンコーダ・デコーダのノイズ予測器と、ゼロ畳み込みによる条件注入
  - 潜在コーデック（identity / space_to_depth / trained_tiny_ae）
  - DSRNet（低解像度画像を条件とする超解像）と2段階データ拡張
"""

import concurrent.futures
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from checkpoint import load_checkpoint, save_checkpoint
from conditions import ConditionStack
from hsi_data import HsiCube, RgbImage, crop_patches, extract_rgb
from numerics import (
    DTYPE,
    Conv2d,
    LayerNorm,
    Linear,
    NumericalError,
    RandomSource,
    area_downsample,
    as_array,
    backward,
    bilinear_resize,
    check_finite,
    gaussian_sample,
    relu,
    seeded_init,
)
from rgan import RGAN, TrainResult, rgan_forward

Timestep = Union[int, torch.Tensor]


# ---------------------------------------------------------------------------
# ノイズスケジュール
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    """alpha / alpha_bar は t=1..T を 0 始まりで保持する。t=0 は ᾱ=1 とみなす"""

    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return int(self.alpha.shape[0])

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if t < 0 or t > self.T:
            raise ValueError(f"タイムステップ {t} が範囲 [0, {self.T}] 外です")
        return t

    def alpha_bar_at(self, t: int) -> float:
        t = self.check_timestep(t)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_bar_of(self, t: Timestep) -> torch.Tensor:
        """スカラーまたはバッチのタイムステップに対する ᾱ（テンソル）"""
        full = torch.from_numpy(np.concatenate([[1.0], self.alpha_bar]))
        idx = torch.as_tensor(t, dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() > self.T):
            raise ValueError(f"タイムステップが範囲 [0, {self.T}] 外です: {idx.tolist()}")
        return full[idx]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T は 1 以上である必要があります: {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"0 < beta_start <= beta_end < 1 を満たしません: {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(alpha, np.cumprod(alpha), float(beta_start), float(beta_end))


def _broadcast(value: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if value.dim() == 0:
        return value
    return value.reshape(-1, *([1] * (like.dim() - 1)))


def forward_noise(z0: torch.Tensor, t: Timestep, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1-ᾱ_t) ε。t はスカラーまたはサンプルごとのテンソル"""
    if eps.shape != z0.shape:
        raise ValueError(f"ノイズ形状 {tuple(eps.shape)} が z0 {tuple(z0.shape)} と一致しません")
    ab = _broadcast(schedule.alpha_bar_of(t), z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def ddim_step(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """決定的 DDIM 更新（確率項なし）"""
    t = schedule.check_timestep(t)
    t_prev = schedule.check_timestep(t_prev)
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) は t ({t}) より小さい必要があります")
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def timestep_subsequence(T: int, steps: int) -> List[int]:
    """T から 0 までの等間隔な降順タイムステップ列（長さ steps+1）"""
    if steps < 1 or steps > T:
        raise ValueError(f"steps は 1 以上 T={T} 以下である必要があります: {steps}")
    return [(T * (steps - i)) // steps for i in range(steps + 1)]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """正弦波タイムステップ埋め込み [N, dim]"""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    args = t.to(DTYPE).reshape(-1, 1) * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# ---------------------------------------------------------------------------
# 潜在コーデック
# ---------------------------------------------------------------------------
class LatentCodec(ABC):
    """画像 [N, C, H, W] ⇔ 潜在 [N, c, h, w]"""

    kind = ""

    @abstractmethod
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def latent_shape(self, image_shape: Sequence[int]) -> Tuple[int, int, int]:
        ...

    def config(self) -> dict:
        return {"kind": self.kind}


class IdentityCodec(LatentCodec):
    kind = "identity"

    def encode(self, x):
        return x

    def decode(self, z):
        return z

    def latent_shape(self, image_shape):
        c, h, w = image_shape
        return int(c), int(h), int(w)


class SpaceToDepthCodec(LatentCodec):
    """factor x factor の画素ブロックをチャネルに並べ替える（可逆な置換）"""

    kind = "space_to_depth"

    def __init__(self, factor: int = 2):
        self.factor = factor

    def encode(self, x):
        return F.pixel_unshuffle(x, self.factor)

    def decode(self, z):
        return F.pixel_shuffle(z, self.factor)

    def latent_shape(self, image_shape):
        c, h, w = image_shape
        if h % self.factor or w % self.factor:
            raise ValueError(f"画像サイズ {h}x{w} が倍率 {self.factor} で割り切れません")
        return c * self.factor ** 2, h // self.factor, w // self.factor

    def config(self):
        return {"kind": self.kind, "factor": self.factor}


class TinyAutoencoderCodec(nn.Module, LatentCodec):
    """面積平均 + 畳み込みで縮小し、バイリニア + 畳み込みで戻す小型オートエンコーダ"""

    kind = "trained_tiny_ae"

    def __init__(self, channels: int = 3, latent_channels: int = 4, factor: int = 2, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.latent_channels = latent_channels
        self.factor = factor
        self.seed = seed
        with seeded_init(seed):
            self.enc1 = Conv2d(channels, 16, 3)
            self.enc2 = Conv2d(16, latent_channels, 3)
            self.dec1 = Conv2d(latent_channels, 16, 3)
            self.dec2 = Conv2d(16, channels, 3)

    def encode(self, x):
        return self.enc2(relu(self.enc1(area_downsample(x, self.factor))))

    def decode(self, z):
        size = (z.shape[-2] * self.factor, z.shape[-1] * self.factor)
        return self.dec2(relu(self.dec1(bilinear_resize(z, size))))

    def latent_shape(self, image_shape):
        c, h, w = image_shape
        if c != self.channels or h % self.factor or w % self.factor:
            raise ValueError(f"画像形状 {tuple(image_shape)} はこのコーデックで扱えません")
        return self.latent_channels, h // self.factor, w // self.factor

    def config(self):
        return {
            "kind": self.kind,
            "channels": self.channels,
            "latent_channels": self.latent_channels,
            "factor": self.factor,
            "seed": self.seed,
        }


def make_codec(kind: str = "identity", channels: int = 3, **kwargs) -> LatentCodec:
    if kind == "identity":
        return IdentityCodec()
    if kind == "space_to_depth":
        return SpaceToDepthCodec(kwargs.get("factor", 2))
    if kind == "trained_tiny_ae":
        return TinyAutoencoderCodec(
            channels,
            kwargs.get("latent_channels", 4),
            kwargs.get("factor", 2),
            kwargs.get("seed", 0),
        )
    raise ValueError(f"未知のコーデック種別: {kind}（対応: identity, space_to_depth, trained_tiny_ae）")


def train_codec(
    images: torch.Tensor, codec: TinyAutoencoderCodec, steps: int = 500, lr: float = 2e-3, seed: int = 0
) -> TrainResult:
    """再構成 MSE で小型オートエンコーダを学習"""
    images = as_array(images)
    optimizer = torch.optim.AdamW(codec.parameters(), lr=lr, weight_decay=0.0)
    rng = RandomSource(seed, stream=3)
    batch = min(8, images.shape[0])
    losses = []
    print(f"[INFO] コーデック学習開始: 画像 {images.shape[0]} 枚, ステップ数 {steps}", flush=True)
    for step in range(steps):
        x = images[torch.as_tensor(rng.integers(0, images.shape[0], batch), dtype=torch.long)]
        optimizer.zero_grad()
        loss = F.mse_loss(codec.decode(codec.encode(x)), x)
        if not torch.isfinite(loss):
            raise NumericalError(f"コーデック学習の損失が NaN / Inf になりました (step {step})")
        backward(loss)
        optimizer.step()
        losses.append(loss.item())
    if losses:
        print(f"[OK] コーデック学習完了: MSE {losses[0]:.6f} → {losses[-1]:.6f}", flush=True)
    return TrainResult(codec, losses)


# ---------------------------------------------------------------------------
# ノイズ予測器
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DenoiserConfig:
    """
    Args:
        in_channels: 潜在チャネル数
        base_channels: 第1段のチャネル数（第2・第3段は2倍）
        time_dim: タイムステップ埋め込みの次元
        global_dim: グローバル埋め込みの次元（0 なら使わない）
        conditions: 空間条件の (タグ, チャネル数) の並び
        encoder_channels: 条件特徴抽出器のチャネル数
        seed: 重み初期化のシード
    """

    in_channels: int = 3
    base_channels: int = 8
    time_dim: int = 32
    global_dim: int = 0
    conditions: Tuple[Tuple[str, int], ...] = ()
    encoder_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple((str(t), int(c)) for t, c in self.conditions))
        tags = [t for t, _ in self.conditions]
        if len(set(tags)) != len(tags):
            raise ValueError(f"条件タグが重複しています: {tags}")

    @property
    def level_channels(self) -> Tuple[int, int, int]:
        c = self.base_channels
        return c, 2 * c, 2 * c

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        return cls(**data)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = LayerNorm(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3)
        self.time = Linear(time_dim, out_channels)
        self.norm2 = LayerNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3)
        self.skip = Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x, temb):
        h = self.conv1(relu(self.norm1(x))) + self.time(temb)[..., None, None]
        h = self.conv2(relu(self.norm2(h)))
        return (x if self.skip is None else self.skip(x)) + h


class ConditionEncoder(nn.Module):
    """条件マップ → 3スケールの特徴。各スケールはゼロ初期化 1x1 畳み込みを通す"""

    def __init__(self, layout: Sequence[Tuple[str, int]], channels: int, level_channels: Sequence[int]):
        super().__init__()
        self.layout = tuple(layout)
        in_channels = sum(c for _, c in self.layout)
        self.stem = Conv2d(in_channels, channels, 3)
        self.conv1 = Conv2d(channels, channels, 3)
        self.conv2 = Conv2d(channels, channels, 3)
        self.conv3 = Conv2d(channels, channels, 3)
        self.zero_convs = nn.ModuleList(Conv2d(channels, c, 1, zero_init=True) for c in level_channels)

    def forward(self, conditions: ConditionStack, batch: int) -> List[torch.Tensor]:
        extents = conditions.extents
        maps = []
        for tag, channels in self.layout:
            m = conditions.spatial_maps.get(tag)
            if m is None:
                # 欠けている条件はゼロ入力として扱う
                maps.append(torch.zeros(batch, channels, *extents, dtype=DTYPE))
                continue
            if m.shape[-3] != channels:
                raise ValueError(f"条件 {tag} のチャネル数 {m.shape[-3]} が設定 {channels} と一致しません")
            if m.dim() == 3:
                m = m.unsqueeze(0).expand(batch, -1, -1, -1)
            elif m.shape[0] != batch:
                raise ValueError(f"条件 {tag} のバッチ数 {m.shape[0]} が {batch} と一致しません")
            maps.append(m)
        x = torch.cat(maps, dim=1)
        f1 = relu(self.conv1(relu(self.stem(x))))
        f2 = relu(self.conv2(area_downsample(f1, 2)))
        f3 = relu(self.conv3(area_downsample(f2, 2)))
        return [zero(f) for zero, f in zip(self.zero_convs, (f1, f2, f3))]


def condition_encode(
    conditions: ConditionStack, encoder: ConditionEncoder, latent_hw: Tuple[int, int], batch: int = 1
) -> List[torch.Tensor]:
    """
    潜在サイズに揃えた条件マップから、各スケールに加算する特徴を計算

    Raises:
        ValueError: マップのサイズが潜在サイズと一致しない、または未設定のタグを含む
    """
    if conditions.extents != tuple(latent_hw):
        raise ValueError(f"条件マップのサイズ {conditions.extents} が潜在サイズ {tuple(latent_hw)} と一致しません")
    known = {t for t, _ in encoder.layout}
    unknown = [t for t in conditions.tags if t not in known]
    if unknown:
        raise ValueError(f"モデルが扱わない条件タグ: {unknown}")
    return encoder(conditions, batch)


class Denoiser(nn.Module):
    """3段のエンコーダ・デコーダ（スキップ接続付き）。出力畳み込みはゼロ初期化"""

    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        c1, c2, c3 = cfg.level_channels
        with seeded_init(cfg.seed):
            self.time_fc1 = Linear(cfg.time_dim, cfg.time_dim)
            self.time_fc2 = Linear(cfg.time_dim, cfg.time_dim)
            self.global_proj = Linear(cfg.global_dim, cfg.time_dim, zero_init=True) if cfg.global_dim else None
            self.control = (
                ConditionEncoder(cfg.conditions, cfg.encoder_channels, cfg.level_channels)
                if cfg.conditions else None
            )
            self.inp = Conv2d(cfg.in_channels, c1, 3)
            self.enc1 = ResidualBlock(c1, c1, cfg.time_dim)
            self.enc2 = ResidualBlock(c1, c2, cfg.time_dim)
            self.mid = ResidualBlock(c2, c3, cfg.time_dim)
            self.dec2 = ResidualBlock(c3 + c2, c2, cfg.time_dim)
            self.dec1 = ResidualBlock(c2 + c1, c1, cfg.time_dim)
            self.out_norm = LayerNorm(c1)
            self.out = Conv2d(c1, cfg.in_channels, 3, zero_init=True)

    def forward(self, z: torch.Tensor, t: Timestep, conditions: Optional[ConditionStack] = None) -> torch.Tensor:
        if z.dim() != 4:
            raise ValueError(f"潜在は [N, C, H, W] である必要があります: {tuple(z.shape)}")
        n, _, h, w = z.shape
        if h % 4 or w % 4:
            raise ValueError(f"潜在サイズ {h}x{w} は 4 の倍数である必要があります")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        temb = self.time_fc2(relu(self.time_fc1(timestep_embedding(t, self.config.time_dim))))

        additions = None
        if conditions is not None and not conditions.is_empty():
            if conditions.global_embedding is not None:
                if self.global_proj is None:
                    raise ValueError("このモデルはグローバル埋め込みを扱いません")
                temb = temb + self.global_proj(conditions.global_embedding)
            if conditions.spatial_maps:
                if self.control is None:
                    raise ValueError(f"このモデルは空間条件を扱いません: {list(conditions.tags)}")
                additions = condition_encode(conditions.resized((h, w)), self.control, (h, w), n)

        h1 = self.enc1(self.inp(z), temb)
        if additions is not None:
            h1 = h1 + additions[0]
        h2 = self.enc2(area_downsample(h1, 2), temb)
        if additions is not None:
            h2 = h2 + additions[1]
        h3 = self.mid(area_downsample(h2, 2), temb)
        if additions is not None:
            h3 = h3 + additions[2]
        u2 = self.dec2(torch.cat([bilinear_resize(h3, h2.shape[-2:]), h2], dim=1), temb)
        u1 = self.dec1(torch.cat([bilinear_resize(u2, h1.shape[-2:]), h1], dim=1), temb)
        return self.out(relu(self.out_norm(u1)))


# ---------------------------------------------------------------------------
# 学習
# ---------------------------------------------------------------------------
def diffusion_loss(
    model,
    z0: torch.Tensor,
    t: Timestep,
    eps: torch.Tensor,
    conditions: Optional[ConditionStack],
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """真のノイズと予測ノイズの平均二乗誤差"""
    z_t = forward_noise(z0, t, eps, schedule)
    return F.mse_loss(model(z_t, t, conditions), eps)


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    lr_min: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    condition_dropout: float = 0.0


def train_diffusion(
    images: torch.Tensor,
    model: Denoiser,
    schedule: NoiseSchedule,
    codec: Optional[LatentCodec] = None,
    config: Optional[DiffusionTrainConfig] = None,
    conditions: Optional[ConditionStack] = None,
) -> TrainResult:
    """
    ランダムなタイムステップとノイズでノイズ予測損失を最小化

    Args:
        images: [N, C, H, W] 学習画像
        conditions: バッチ化された条件（画像と同じ並び）。condition_dropout > 0 なら
            ステップごとに各タグを確率的に落とす
    """
    config = config or DiffusionTrainConfig()
    codec = codec or IdentityCodec()
    images = as_array(images)
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError(f"学習画像は空でない [N, C, H, W] である必要があります: {tuple(images.shape)}")
    with torch.no_grad():
        z0_all = codec.encode(images).detach()

    n = images.shape[0]
    batch = min(config.batch_size, n)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(config.steps, 1), eta_min=config.lr_min
    )
    rng = RandomSource(config.seed, stream=2)
    report_every = max(config.steps // 10, 1)

    print(f"[INFO] 拡散モデル学習開始: 画像 {n} 枚, ステップ数 {config.steps}, バッチ {batch}", flush=True)
    losses: List[float] = []
    model.train()
    for step in range(config.steps):
        idx = rng.integers(0, n, batch)
        t = torch.as_tensor(rng.integers(1, schedule.T + 1, batch), dtype=torch.long)
        z0 = z0_all[torch.as_tensor(idx, dtype=torch.long)]
        eps = gaussian_sample(rng, z0.shape)
        cond = conditions.select(idx) if conditions is not None else None
        if cond is not None and config.condition_dropout > 0:
            for tag in cond.tags:
                if rng.uniform() < config.condition_dropout:
                    cond = cond.without(tag)

        optimizer.zero_grad()
        loss = diffusion_loss(model, z0, t, eps, cond, schedule)
        if not torch.isfinite(loss):
            raise NumericalError(
                f"拡散モデル学習の損失が NaN / Inf になりました (step {step}, lr {scheduler.get_last_lr()[0]:.2e})"
            )
        backward(loss)
        optimizer.step()
        scheduler.step()
        losses.append(loss.item())
        if (step + 1) % report_every == 0 or step + 1 == config.steps:
            print(f"[PROGRESS] 拡散モデル学習: {int((step + 1) / config.steps * 100)}% (MSE {losses[-1]:.6f})", flush=True)
    model.eval()

    if losses:
        print(f"[OK] 拡散モデル学習完了: MSE {losses[0]:.6f} → {losses[-1]:.6f}", flush=True)
    return TrainResult(model, losses)


# ---------------------------------------------------------------------------
# サンプリング
# ---------------------------------------------------------------------------
def sample(
    model,
    schedule: NoiseSchedule,
    steps: int,
    conditions: Optional[ConditionStack] = None,
    codec: Optional[LatentCodec] = None,
    seed: int = 0,
    image_shape: Sequence[int] = (3, 32, 32),
    stream: int = 0,
) -> torch.Tensor:
    """
    シード固定のガウス雑音 z_T から DDIM で復元し、コーデックで画像に戻す

    Returns:
        [C, H, W] 画像（クランプなし）
    """
    codec = codec or IdentityCodec()
    timesteps = timestep_subsequence(schedule.T, steps)
    latent_shape = codec.latent_shape(image_shape)
    z = gaussian_sample(RandomSource(seed, stream), (1, *latent_shape))
    with torch.no_grad():
        for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
            eps_hat = model(z, torch.full((1,), t, dtype=torch.long), conditions)
            z = ddim_step(z, eps_hat, t, t_prev, schedule)
        image = codec.decode(z)
    return check_finite(image[0], "サンプル画像")


def sample_many(
    model,
    schedule: NoiseSchedule,
    steps: int,
    seeds: Sequence[int],
    conditions: Optional[Sequence[Optional[ConditionStack]]] = None,
    codec: Optional[LatentCodec] = None,
    image_shape: Sequence[int] = (3, 32, 32),
    workers: int = 1,
) -> List[torch.Tensor]:
    """シードごとに独立なサンプリングをスレッドプールで並列実行（結果はシード順）"""
    conditions = list(conditions) if conditions is not None else [None] * len(seeds)
    if len(conditions) != len(seeds):
        raise ValueError(f"条件数 {len(conditions)} がシード数 {len(seeds)} と一致しません")
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        futures = [
            executor.submit(sample, model, schedule, steps, cond, codec, seed, image_shape)
            for seed, cond in zip(seeds, conditions)
        ]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# DSRNet
# ---------------------------------------------------------------------------
def build_dsrnet(channels: int = 3, base_channels: int = 8, seed: int = 0, codec: Optional[LatentCodec] = None) -> Denoiser:
    """低解像度画像（バイリニア拡大済み）を lowres 条件として受け取るノイズ予測器"""
    codec = codec or IdentityCodec()
    latent_channels = codec.latent_shape((channels, 8, 8))[0]
    return Denoiser(DenoiserConfig(
        in_channels=latent_channels,
        base_channels=base_channels,
        conditions=(("lowres", channels),),
        seed=seed,
    ))


def lowres_condition(lr: Union[np.ndarray, torch.Tensor], scale: int) -> ConditionStack:
    lr = as_array(lr)
    size = (lr.shape[-2] * scale, lr.shape[-1] * scale)
    return ConditionStack({"lowres": bilinear_resize(lr, size)})


def train_dsrnet(
    hr_images: torch.Tensor,
    model: Denoiser,
    schedule: NoiseSchedule,
    scale: int,
    codec: Optional[LatentCodec] = None,
    config: Optional[DiffusionTrainConfig] = None,
) -> TrainResult:
    """高解像度画像を面積平均で縮小したものを条件にして学習"""
    hr_images = as_array(hr_images)
    lr = area_downsample(hr_images, scale)
    return train_diffusion(hr_images, model, schedule, codec, config, lowres_condition(lr, scale))


def dsrnet_super_resolve(
    lr_rgb: Union[RgbImage, np.ndarray],
    model: Denoiser,
    schedule: NoiseSchedule,
    steps: int,
    seed: int = 0,
    scale: int = 2,
    codec: Optional[LatentCodec] = None,
    stream: int = 0,
) -> np.ndarray:
    """
    Returns:
        [C, h*scale, w*scale] の [0,1] にクランプした高解像度画像
    """
    if scale not in (2, 4):
        raise ValueError(f"倍率は 2 または 4 のみ対応: {scale}")
    values = lr_rgb.values if isinstance(lr_rgb, RgbImage) else np.asarray(lr_rgb)
    c, h, w = values.shape
    out = sample(
        model, schedule, steps, lowres_condition(values, scale), codec, seed,
        (c, h * scale, w * scale), stream,
    )
    return out.clamp(0.0, 1.0).numpy()


# ---------------------------------------------------------------------------
# 保存・読み込み
# ---------------------------------------------------------------------------
@dataclass
class DiffusionBundle:
    model: Denoiser
    codec: LatentCodec
    schedule: NoiseSchedule
    extra: Dict = field(default_factory=dict)


def save_diffusion(bundle: DiffusionBundle, path: Union[str, Path]) -> Path:
    modules = {"denoiser": bundle.model}
    if isinstance(bundle.codec, nn.Module):
        modules["codec"] = bundle.codec
    config = {
        "denoiser": asdict(bundle.model.config),
        "codec": bundle.codec.config(),
        "schedule": bundle.schedule.to_dict(),
        "extra": bundle.extra,
    }
    return save_checkpoint(nn.ModuleDict(modules), "diffusion", config, path)


def load_diffusion(path: Union[str, Path]) -> DiffusionBundle:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "diffusion":
        raise ValueError(f"拡散モデルのチェックポイントではありません: {ckpt.kind}")
    cfg = ckpt.config
    model = Denoiser(DenoiserConfig.from_dict(cfg["denoiser"]))
    codec_cfg = dict(cfg["codec"])
    codec = make_codec(codec_cfg.pop("kind"), **codec_cfg)
    modules = {"denoiser": model}
    if isinstance(codec, nn.Module):
        modules["codec"] = codec
    nn.ModuleDict(modules).load_state_dict(ckpt.state)
    model.eval()
    sched = cfg["schedule"]
    return DiffusionBundle(model, codec, make_schedule(sched["T"], sched["beta_start"], sched["beta_end"]), cfg.get("extra", {}))


# ---------------------------------------------------------------------------
# 2段階データ拡張
# ---------------------------------------------------------------------------
@dataclass
class AugmentResult:
    patches: List[HsiCube]
    manifest: List[Dict]


def augment_two_stage(
    cubes: Sequence[HsiCube],
    dsrnet: DiffusionBundle,
    rgan_model: RGAN,
    scale: int,
    patch_size: int = 256,
    stride: Optional[int] = None,
    steps: int = 20,
    seed: int = 0,
    source_ids: Optional[Sequence[str]] = None,
) -> AugmentResult:
    """
    RGB バンドを DSRNet で先に超解像し、それをガイドに RGAN で全バンドを超解像してからパッチに切り出す
    """
    if rgan_model.scale != scale:
        raise ValueError(f"RGAN の倍率 x{rgan_model.scale} が指定倍率 x{scale} と一致しません")
    stride = stride or patch_size // 2
    source_ids = list(source_ids) if source_ids is not None else [f"cube_{i:04d}" for i in range(len(cubes))]
    if len(source_ids) != len(cubes):
        raise ValueError(f"ソース ID 数 {len(source_ids)} がキューブ数 {len(cubes)} と一致しません")

    patches: List[HsiCube] = []
    rows: List[Dict] = []
    for i, (cube, source) in enumerate(zip(cubes, source_ids)):
        print(f"[INFO] 2段階超解像 ({i + 1}/{len(cubes)}): {source}", flush=True)
        rgb = extract_rgb(cube)
        hr_rgb = dsrnet_super_resolve(rgb, dsrnet.model, dsrnet.schedule, steps, seed, scale, dsrnet.codec, stream=i)
        hr_cube = rgan_forward(cube, hr_rgb, rgan_model)
        grid, cube_patches = crop_patches(hr_cube, patch_size, stride)
        for (r, c), patch in zip(grid.origins, cube_patches):
            rows.append({
                "patch_index": len(patches),
                "source": source,
                "origin": [r, c],
                "scale": scale,
            })
            patches.append(patch.with_values(patch.values, meta={"source": source}))
        print(f"[OK] {source}: {len(cube_patches)} パッチ", flush=True)
    return AugmentResult(patches, rows)
