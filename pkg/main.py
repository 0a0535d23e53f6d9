#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
ハイパースペクトル画像生成ツール
波長整列・パッチ切り出し・劣化処理、RGB ガイド付き超解像（RGAN）と潜在拡散モデルの
学習・推論、2段階超解像によるデータ拡張、評価指標の計算をサブコマンドで実行

終了コード: 0 成功 / 1 使い方の誤り / 2 データの誤り / 3 数値異常（NaN / Inf）
"""

import argparse
import concurrent.futures
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

# Windows環境での文字化け対策
if sys.platform == 'win32':
    os.environ['PYTHONIOENCODING'] = 'utf-8'
    try:
        if hasattr(sys.stdout, 'buffer') and sys.stdout.encoding.lower() != 'utf-8':
            import io
            sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace', line_buffering=True)
    except (AttributeError, OSError):
        pass

import numpy as np
import torch

from checkpoint import checkpoint_paths
from conditions import (
    CONDITION_TAGS,
    GLOBAL_DIM,
    PROXIES,
    TEXT_CATEGORIES,
    ConditionStack,
    build_conditions,
    stack_conditions,
)
from diffusion import (
    DenoiserConfig,
    Denoiser,
    DiffusionBundle,
    DiffusionTrainConfig,
    augment_two_stage,
    build_dsrnet,
    dsrnet_super_resolve,
    load_diffusion,
    make_codec,
    make_schedule,
    sample_many,
    save_diffusion,
    train_codec,
    train_diffusion,
    train_dsrnet,
)
from hsi_data import (
    DegradationSpec,
    HsiCube,
    RgbImage,
    align_to_default_grid,
    align_wavelengths,
    crop_patches,
    degrade,
    extract_rgb,
    list_cube_files,
    read_cube,
    write_cube,
)
from metrics import SprConfig, evaluate_pairs, load_spectral_set, metric_rows, spr_srec, write_metrics_csv
from numerics import NumericalError
from preview_writer import PreviewWriter
from rgan import (
    RGAN,
    AttentionConfig,
    RganTrainConfig,
    load_rgan,
    make_training_pairs,
    rgan_forward,
    save_rgan,
    train_rgan,
)
from run_config import (
    TOOL_VERSION,
    ParamSpec,
    RunConfig,
    UsageError,
    build_manifest,
    resolve_config,
    write_manifest,
    write_resolved_config,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


@dataclass
class CommandResult:
    inputs: List[Path] = field(default_factory=list)
    outputs: List[Path] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# 共通処理
# ---------------------------------------------------------------------------
def _map_files(fn: Callable, paths: Sequence[Path], threads: int) -> list:
    """ファイル単位の処理をスレッドプールで実行（結果は入力順）"""
    if threads <= 1 or len(paths) <= 1:
        return [fn(p) for p in paths]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, paths))


def _split_list(raw: Optional[str]) -> List[str]:
    return [item.strip() for item in (raw or "").split(",") if item.strip()]


def _checkpoint_files(path: Path) -> List[Path]:
    return list(checkpoint_paths(path))


def _as_rgb(cube: HsiCube) -> RgbImage:
    return RgbImage.from_cube(cube) if cube.bands == 3 else extract_rgb(cube)


def _image_to_cube(values: np.ndarray, extra: Dict, meta: Dict) -> HsiCube:
    values = np.clip(values, 0.0, 1.0)
    if extra.get("rgb", True):
        return RgbImage(values).to_cube(meta)
    return HsiCube(values, np.asarray(extra["wavelengths"], dtype=np.float64), meta)


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------
def cmd_align(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    grid = np.linspace(config["grid_start"], config["grid_end"], config["grid_bands"])
    out_dir = config.out / "aligned"

    def align_one(path: Path) -> Path:
        cube = read_cube(path)
        if config["partial"]:
            aligned = align_to_default_grid(cube, grid)
        else:
            aligned = align_wavelengths(cube, grid)
        if aligned.meta.get("partial_coverage"):
            print(f"[WARNING] {path.name}: 波長範囲が一部しかカバーされていません（{aligned.bands} バンド）", flush=True)
        return write_cube(aligned, out_dir / f"{path.stem}.hsc")

    print(f"【ステップ1/1】波長整列: {len(files)} ファイル → {config['grid_bands']} バンド", flush=True)
    outputs = _map_files(align_one, files, config.threads)
    print(f"[OK] 波長整列完了: {len(outputs)} ファイル", flush=True)
    return CommandResult(files, outputs)


def cmd_crop(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    size, stride = config["patch_size"], config["stride"] or config["patch_size"] // 2
    out_dir = config.out / "patches"

    def crop_one(path: Path) -> List[Path]:
        _, patches = crop_patches(read_cube(path), size, stride)
        return [
            write_cube(p, out_dir / f"{path.stem}_r{p.meta['origin'][0]:05d}_c{p.meta['origin'][1]:05d}.hsc")
            for p in patches
        ]

    print(f"【ステップ1/1】パッチ切り出し: サイズ {size}, ストライド {stride}", flush=True)
    outputs = [p for group in _map_files(crop_one, files, config.threads) for p in group]
    print(f"[OK] パッチ切り出し完了: {len(outputs)} パッチ", flush=True)
    return CommandResult(files, outputs, {"patches": len(outputs)})


def cmd_degrade(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    spec = DegradationSpec(config["kind"], config["sigma"], config["factor"], config.seed, config["clip"])
    out_dir = config.out / "degraded"
    outputs = []
    print(f"【ステップ1/1】劣化処理: {spec.kind}", flush=True)
    for path in files:
        outputs.append(write_cube(degrade(read_cube(path), spec), out_dir / f"{path.stem}.hsc"))
    print(f"[OK] 劣化処理完了: {len(outputs)} ファイル", flush=True)
    return CommandResult(files, outputs)


def cmd_train_rgan(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    cubes = [read_cube(p) for p in files]
    if config["patch_size"]:
        cubes = [p for c in cubes for p in crop_patches(c, config["patch_size"], config["patch_size"])[1]]

    print(f"【ステップ1/2】学習ペア作成: {len(cubes)} キューブ, 倍率 x{config['scale']}", flush=True)
    pairs = make_training_pairs(cubes, config["scale"])
    attention = AttentionConfig(channels=config["channels"], heads=config["heads"], layers=config["layers"])
    model = RGAN(cubes[0].bands, attention, config["scale"], config.seed)

    print("\n【ステップ2/2】RGAN 学習", flush=True)
    result = train_rgan(pairs, model, RganTrainConfig(
        steps=config["steps"],
        lr=config["lr"],
        lr_min=config["lr_min"],
        batch_size=config["batch_size"],
        weight_decay=config["weight_decay"],
        seed=config.seed,
        guidance=config["guidance"],
    ))
    save_rgan(model, config.out / "rgan")
    extra = {"initial_loss": result.losses[0], "final_loss": result.losses[-1]} if result.losses else {}
    return CommandResult(files, _checkpoint_files(config.out / "rgan"), extra)


def cmd_sr(config: RunConfig) -> CommandResult:
    model_path = Path(config["model"])
    model = load_rgan(model_path)
    lr_cube = read_cube(config["input"])
    rgb_cube = read_cube(config["rgb"])
    print(f"【ステップ1/1】ガイド付き超解像: x{model.scale}", flush=True)
    sr = rgan_forward(lr_cube, _as_rgb(rgb_cube), model, guidance=config["guidance"])
    output = write_cube(sr, config.out / "sr" / f"{Path(config['input']).stem}.hsc")
    print(f"[OK] 超解像完了: {sr.height}x{sr.width}", flush=True)
    PreviewWriter(config.out).try_write(sr, Path(config["input"]).stem)
    inputs = [Path(config["input"]), Path(config["rgb"]), *_checkpoint_files(model_path)]
    return CommandResult(inputs, [output])


def cmd_train_diff(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    cubes = [read_cube(p) for p in files]
    use_rgb = config["rgb"]
    rgbs = [np.asarray(_as_rgb(c).values, dtype=np.float64) for c in cubes]
    images = torch.stack([torch.from_numpy(r if use_rgb else c.values.astype(np.float64)) for r, c in zip(rgbs, cubes)])
    channels = images.shape[1]
    schedule = make_schedule(config["timesteps"], config["beta_start"], config["beta_end"])
    codec = make_codec(config["codec"], channels, seed=config.seed)
    train_config = DiffusionTrainConfig(
        steps=config["steps"],
        lr=config["lr"],
        batch_size=config["batch_size"],
        seed=config.seed,
        condition_dropout=config["condition_dropout"],
    )

    step_total = 2 if config["codec"] == "trained_tiny_ae" else 1
    if config["codec"] == "trained_tiny_ae":
        print(f"【ステップ1/{step_total}】コーデック学習", flush=True)
        train_codec(images, codec, config["codec_steps"], seed=config.seed)

    latent_channels = codec.latent_shape(tuple(images.shape[1:]))[0]
    mode = config["mode"]
    print(f"\n【ステップ{step_total}/{step_total}】拡散モデル学習（{mode}）", flush=True)
    if mode == "dsrnet":
        model = build_dsrnet(channels, config["base_channels"], config.seed, codec)
        result = train_dsrnet(images, model, schedule, config["scale"], codec, train_config)
    else:
        tags = _split_list(config["conditions"]) if mode == "conditional" else []
        unknown = [t for t in tags if t not in PROXIES]
        if unknown:
            raise UsageError(f"内蔵プロキシの無い条件タグ: {unknown}（対応: {', '.join(PROXIES)}）")
        category = config["category"] or None
        use_global = mode == "conditional" and (category is not None or config["content"])
        model = Denoiser(DenoiserConfig(
            in_channels=latent_channels,
            base_channels=config["base_channels"],
            global_dim=GLOBAL_DIM if use_global else 0,
            conditions=tuple((t, 1) for t in tags),
            seed=config.seed,
        ))
        conditions = None
        if mode == "conditional":
            conditions = stack_conditions([
                build_conditions(r, tags, category if use_global else None, config["content"] and use_global)
                for r in rgbs
            ])
        result = train_diffusion(images, model, schedule, codec, train_config, conditions)

    extra = {
        "mode": mode,
        "scale": config["scale"] if mode == "dsrnet" else None,
        "rgb": use_rgb,
        "wavelengths": [float(w) for w in cubes[0].wavelengths],
        "image_shape": list(images.shape[1:]),
        "category": config["category"] or None,
        "content": bool(config["content"]),
    }
    save_diffusion(DiffusionBundle(model, codec, schedule, extra), config.out / "diffusion")
    summary = {"initial_loss": result.losses[0], "final_loss": result.losses[-1]} if result.losses else {}
    return CommandResult(files, _checkpoint_files(config.out / "diffusion"), summary)


def _read_condition_maps(raw: Optional[str]) -> Tuple[Dict[str, np.ndarray], List[Path]]:
    """"tag=path,..." 形式の条件マップ指定（1 または 3 バンドの HSC）を読み込む"""
    maps, paths = {}, []
    for item in _split_list(raw):
        tag, sep, path = item.partition("=")
        if not sep or tag not in CONDITION_TAGS:
            raise UsageError(f"条件マップは tag=path 形式で指定してください（tag: {', '.join(CONDITION_TAGS)}）: {item}")
        cube = read_cube(path)
        if cube.bands not in (1, 3):
            raise ValueError(f"条件マップは 1 または 3 バンドである必要があります: {path} ({cube.bands} バンド)")
        maps[tag] = cube.values.astype(np.float64)
        paths.append(Path(path))
    return maps, paths


def cmd_sample(config: RunConfig) -> CommandResult:
    model_path = Path(config["model"])
    bundle = load_diffusion(model_path)
    extra = bundle.extra
    inputs = _checkpoint_files(model_path)
    out_dir = config.out / "samples"
    outputs = []

    if extra.get("mode") == "dsrnet":
        if not config["input"]:
            raise UsageError("DSRNet モデルでは --input に低解像度画像が必要です")
        files = list_cube_files(config["input"])
        inputs += files
        print(f"【ステップ1/1】DSRNet 超解像: {len(files)} ファイル", flush=True)
        for i, path in enumerate(files):
            cube = read_cube(path)
            lr = _as_rgb(cube).values if extra.get("rgb", True) else cube.values
            hr = dsrnet_super_resolve(
                lr, bundle.model, bundle.schedule, config["steps"], config.seed, extra["scale"], bundle.codec, stream=i
            )
            outputs.append(write_cube(_image_to_cube(hr, extra, {"seed": config.seed}), out_dir / f"{path.stem}.hsc"))
        return CommandResult(inputs, outputs)

    shape = list(extra.get("image_shape", [3, 32, 32]))
    if config["height"]:
        shape[1] = config["height"]
    if config["width"]:
        shape[2] = config["width"]

    conditions = None
    model_tags = [t for t, _ in bundle.model.config.conditions]
    maps, map_paths = _read_condition_maps(config["condition_maps"])
    inputs += map_paths
    if config["conditions_from"]:
        source = read_cube(config["conditions_from"])
        inputs.append(Path(config["conditions_from"]))
        proxy_tags = [t for t in model_tags if t in PROXIES and t not in maps]
        use_global = bundle.model.config.global_dim > 0
        built = build_conditions(
            _as_rgb(source).values, proxy_tags, extra.get("category") if use_global else None,
            bool(extra.get("content")) and use_global,
        )
        maps = {**{k: v.numpy() for k, v in built.spatial_maps.items()}, **maps}
        conditions = ConditionStack(maps, built.global_embedding)
    elif maps:
        conditions = ConditionStack(maps)
    if conditions is not None:
        for tag in _split_list(config["drop"]):
            conditions = conditions.without(tag)

    seeds = [config.seed + i for i in range(config["count"])]
    print(f"【ステップ1/1】サンプリング: {len(seeds)} 枚, DDIM {config['steps']} ステップ", flush=True)
    images = sample_many(
        bundle.model, bundle.schedule, config["steps"], seeds, [conditions] * len(seeds),
        bundle.codec, tuple(shape), config.threads,
    )
    for seed, image in zip(seeds, images):
        cube = _image_to_cube(image.numpy(), extra, {"seed": seed})
        outputs.append(write_cube(cube, out_dir / f"sample_{seed:06d}.hsc"))
    print(f"[OK] サンプリング完了: {len(outputs)} 枚", flush=True)
    return CommandResult(inputs, outputs, {"steps": config["steps"], "conditions": list(conditions.tags) if conditions else [], "codec": bundle.codec.kind})


def cmd_augment(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    cubes = [read_cube(p) for p in files]
    scale = config["scale"]
    inputs = list(files)

    if config["rgan"]:
        rgan_model = load_rgan(config["rgan"])
        inputs += _checkpoint_files(Path(config["rgan"]))
    else:
        print("[WARNING] RGAN チェックポイント未指定: 未学習モデルで実行します", flush=True)
        rgan_model = RGAN(cubes[0].bands, AttentionConfig(), scale, config.seed)

    if config["dsrnet"]:
        dsrnet = load_diffusion(config["dsrnet"])
        inputs += _checkpoint_files(Path(config["dsrnet"]))
    else:
        print("[WARNING] DSRNet チェックポイント未指定: 未学習モデルで実行します", flush=True)
        dsrnet = DiffusionBundle(build_dsrnet(3, seed=config.seed), make_codec("identity"), make_schedule())

    print(f"【ステップ1/1】2段階超解像による拡張: {len(cubes)} キューブ, x{scale}", flush=True)
    result = augment_two_stage(
        cubes, dsrnet, rgan_model, scale,
        patch_size=config["patch_size"],
        stride=config["stride"] or None,
        steps=config["steps"],
        seed=config.seed,
        source_ids=[p.stem for p in files],
    )
    out_dir = config.out / "augmented"
    outputs = []
    for row, patch in zip(result.manifest, result.patches):
        path = write_cube(patch, out_dir / f"{row['source']}_p{row['patch_index']:05d}.hsc")
        row["file"] = path.relative_to(config.out).as_posix()
        outputs.append(path)
    provenance = config.out / "augment_manifest.json"
    with open(provenance, "w", encoding="utf-8") as f:
        json.dump(result.manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    print(f"[OK] 拡張完了: {len(outputs)} パッチ", flush=True)
    return CommandResult(inputs, [*outputs, provenance], {"patches": len(outputs)})


def cmd_eval(config: RunConfig) -> CommandResult:
    real_path, gen_path = Path(config["real"]), Path(config["gen"])
    spr_config = SprConfig(config["k"], config["samples"], config["groups"], config.seed, config.threads)
    print("【ステップ1/2】スペクトル集合の読み込み", flush=True)
    real, gen = _map_files(
        lambda p: load_spectral_set(p[0], p[1]), [(real_path, "real"), (gen_path, "generated")], config.threads
    )
    print(f"[INFO] real {len(real)} 行, generated {len(gen)} 行, {real.bands} バンド", flush=True)

    print("\n【ステップ2/2】指標計算", flush=True)
    s_pr, s_rec = spr_srec(real, gen, spr_config)
    values = {"sPr": s_pr, "sRec": s_rec}
    if config["pairs"]:
        real_files, gen_files = list_cube_files(real_path), list_cube_files(gen_path)
        values.update(evaluate_pairs([read_cube(p) for p in gen_files], [read_cube(p) for p in real_files]))
    for name, value in values.items():
        print(f"  {name}: {value:.6f}", flush=True)

    output = write_metrics_csv(metric_rows(values, spr_config), config.out / "metrics.csv")
    inputs = [p for root in (real_path, gen_path) for p in ([root] if root.is_file() else list_cube_files(root))]
    return CommandResult(inputs, [output])


def cmd_preview(config: RunConfig) -> CommandResult:
    files = list_cube_files(config["input"])
    writer = PreviewWriter(config.out, "")
    print(f"【ステップ1/1】プレビュー作成: {len(files)} ファイル", flush=True)
    outputs = _map_files(lambda p: writer.write(read_cube(p), p.stem), files, config.threads)
    print(f"[OK] プレビュー作成完了: {len(outputs)} 枚", flush=True)
    return CommandResult(files, outputs)


# ---------------------------------------------------------------------------
# パラメータ定義
# ---------------------------------------------------------------------------
P = ParamSpec

COMMANDS: Dict[str, Tuple[str, Tuple[ParamSpec, ...], Callable[[RunConfig], CommandResult]]] = {
    "align": ("波長を 400-1000nm / 48 バンドのグリッドに整列", (
        P("input", str, None, "入力キューブ（ファイルまたはディレクトリ）", required=True),
        P("grid_start", float, 400.0, "グリッド始点 nm（デフォルト: 400）"),
        P("grid_end", float, 1000.0, "グリッド終点 nm（デフォルト: 1000）"),
        P("grid_bands", int, 48, "グリッドのバンド数（デフォルト: 48）"),
        P("partial", bool, True, "範囲外の波長を除いたサブグリッドに整列する（false なら範囲外はエラー）"),
    ), cmd_align),
    "crop": ("重複ありのパッチに切り出し", (
        P("input", str, None, "入力キューブ（ファイルまたはディレクトリ）", required=True),
        P("patch_size", int, 256, "パッチサイズ（デフォルト: 256）"),
        P("stride", int, 0, "ストライド（0 ならパッチサイズの半分）"),
    ), cmd_crop),
    "degrade": ("ガウスノイズ付加または面積平均ダウンサンプル", (
        P("input", str, None, "入力キューブ（ファイルまたはディレクトリ）", required=True),
        P("kind", str, "downsample", "劣化種別", choices=("gaussian_noise", "downsample")),
        P("sigma", float, 0.0, "ノイズ標準偏差（デフォルト: 0）"),
        P("factor", int, 2, "縮小倍率", choices=(2, 4)),
        P("clip", bool, True, "ノイズ付加後に [0,1] にクランプする"),
    ), cmd_degrade),
    "train-rgan": ("RGB ガイド付き超解像ネットワーク（RGAN）を学習", (
        P("input", str, None, "高解像度キューブ（ファイルまたはディレクトリ）", required=True),
        P("scale", int, 2, "倍率", choices=(2, 4)),
        P("patch_size", int, 64, "学習パッチサイズ（0 ならキューブ全体）"),
        P("steps", int, 200, "学習ステップ数（デフォルト: 200）"),
        P("lr", float, 1e-4, "初期学習率（デフォルト: 1e-4）"),
        P("lr_min", float, 1e-5, "コサインアニーリングの最終学習率（デフォルト: 1e-5）"),
        P("batch_size", int, 2, "バッチサイズ（デフォルト: 2）"),
        P("weight_decay", float, 1e-2, "AdamW の重み減衰（デフォルト: 0.01）"),
        P("channels", int, 8, "特徴チャネル数（デフォルト: 8）"),
        P("heads", int, 1, "アテンションのヘッド数（デフォルト: 1）"),
        P("layers", int, 2, "GAL の段数（デフォルト: 2）"),
        P("guidance", bool, True, "RGB ガイドを使う（false なら RGB 入力をゼロにする）"),
    ), cmd_train_rgan),
    "sr": ("学習済み RGAN でガイド付き超解像", (
        P("input", str, None, "低解像度キューブ", required=True),
        P("rgb", str, None, "高解像度 RGB（3 バンドの HSC、または RGB を抽出するキューブ）", required=True),
        P("model", str, None, "RGAN チェックポイント（.json）", required=True),
        P("guidance", bool, True, "RGB ガイドを使う"),
    ), cmd_sr),
    "train-diff": ("潜在拡散モデル（無条件 / 条件付き / DSRNet）を学習", (
        P("input", str, None, "学習画像のキューブ（ファイルまたはディレクトリ）", required=True),
        P("mode", str, "unconditional", "学習モード", choices=("unconditional", "conditional", "dsrnet")),
        P("rgb", bool, True, "キューブから R/G/B バンドを取り出して学習する（false なら全バンド）"),
        P("conditions", str, "hed", f"条件タグ（カンマ区切り、対応: {', '.join(PROXIES)}）"),
        P("category", str, "", f"テキスト条件のカテゴリ（{' / '.join(TEXT_CATEGORIES)}）"),
        P("content", bool, False, "画像統計のコンテンツ条件を使う"),
        P("condition_dropout", float, 0.0, "条件ごとのドロップ確率（デフォルト: 0）"),
        P("scale", int, 2, "DSRNet の倍率", choices=(2, 4)),
        P("steps", int, 2000, "学習ステップ数（デフォルト: 2000）"),
        P("lr", float, 2e-3, "学習率（デフォルト: 2e-3）"),
        P("batch_size", int, 8, "バッチサイズ（デフォルト: 8）"),
        P("base_channels", int, 8, "ノイズ予測器の基本チャネル数（デフォルト: 8）"),
        P("codec", str, "identity", "潜在コーデック", choices=("identity", "space_to_depth", "trained_tiny_ae")),
        P("codec_steps", int, 300, "trained_tiny_ae の学習ステップ数（デフォルト: 300）"),
        P("timesteps", int, 1000, "拡散ステップ数 T（デフォルト: 1000）"),
        P("beta_start", float, 1e-4, "β の始点（デフォルト: 1e-4）"),
        P("beta_end", float, 2e-2, "β の終点（デフォルト: 2e-2）"),
    ), cmd_train_diff),
    "sample": ("学習済み拡散モデルから DDIM でサンプリング", (
        P("model", str, None, "拡散モデルのチェックポイント（.json）", required=True),
        P("steps", int, 50, "DDIM ステップ数（デフォルト: 50）"),
        P("count", int, 1, "生成枚数（シードは --seed から連番）"),
        P("height", int, 0, "画像の高さ（0 なら学習時と同じ）"),
        P("width", int, 0, "画像の幅（0 なら学習時と同じ）"),
        P("input", str, "", "DSRNet モデル用の低解像度画像（ファイルまたはディレクトリ）"),
        P("conditions_from", str, "", "条件マップを内蔵プロキシで作るための参照キューブ"),
        P("condition_maps", str, "", "条件マップファイル（tag=path をカンマ区切り）"),
        P("drop", str, "", "アブレーションで外す条件タグ（カンマ区切り）"),
    ), cmd_sample),
    "augment": ("RGB を DSRNet、全バンドを RGAN で超解像してパッチ化する2段階データ拡張", (
        P("input", str, None, "入力キューブ（ファイルまたはディレクトリ）", required=True),
        P("rgan", str, "", "RGAN チェックポイント（未指定なら未学習モデル）"),
        P("dsrnet", str, "", "DSRNet チェックポイント（未指定なら未学習モデル）"),
        P("scale", int, 2, "倍率", choices=(2, 4)),
        P("patch_size", int, 256, "パッチサイズ（デフォルト: 256）"),
        P("stride", int, 0, "ストライド（0 ならパッチサイズの半分）"),
        P("steps", int, 20, "DDIM ステップ数（デフォルト: 20）"),
    ), cmd_augment),
    "eval": ("sPr / sRec（と任意で PSNR / SSIM / SAM）を CSV に出力", (
        P("real", str, None, "実データ（キューブ、ディレクトリ、または .f32 行列）", required=True),
        P("gen", str, None, "生成データ（キューブ、ディレクトリ、または .f32 行列）", required=True),
        P("k", int, 10, "近傍数 k（デフォルト: 10）"),
        P("samples", int, 100000, "各側の抽出数（デフォルト: 100000）"),
        P("groups", int, 10, "グループ数（デフォルト: 10）"),
        P("pairs", bool, False, "ソート順で対応するキューブ組の PSNR / SSIM / SAM も計算する"),
    ), cmd_eval),
    "preview": ("R/G/B バンドのフォールスカラー PPM を作成", (
        P("input", str, None, "入力キューブ（ファイルまたはディレクトリ）", required=True),
    ), cmd_preview),
}


def run(command: str, config: RunConfig) -> CommandResult:
    if command not in COMMANDS:
        raise UsageError(f"未知のサブコマンド: {command}")
    return COMMANDS[command][2](config)


# ---------------------------------------------------------------------------
# 引数解析
# ---------------------------------------------------------------------------
class CliArgumentParser(argparse.ArgumentParser):
    """使い方の誤りを終了コード 1 の UsageError として扱う"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_param(parser: argparse.ArgumentParser, spec: ParamSpec) -> None:
    kwargs: Dict[str, Any] = {"default": None, "dest": spec.name, "help": spec.help}
    if spec.type is bool:
        kwargs["metavar"] = "{true,false}"
    else:
        kwargs["type"] = spec.type
        if spec.choices:
            kwargs["choices"] = spec.choices
    if spec.required:
        kwargs["help"] += "（必須: 設定ファイルでも指定可）"
    parser.add_argument(spec.flag, **kwargs)


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(
        prog="main.py",
        description="ハイパースペクトル画像の生成・超解像・評価ツール",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  # 波長整列とパッチ切り出し
  python main.py align --input ./raw --out ./aligned_run
  python main.py crop --input ./aligned_run/aligned --patch-size 256 --stride 128

  # 2段階超解像によるデータ拡張
  python main.py augment --input ./cubes --rgan ./rgan_run/rgan.json --dsrnet ./dsr_run/diffusion.json

  # 設定ファイルを使う（コマンドライン引数が優先）
  python main.py eval --config configs/eval.ini --seed 1
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="command", metavar="<command>")
    subparsers.required = True
    for name, (description, specs, _) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=description, description=description)
        sub.add_argument("--config", default=None, help="INI 設定ファイル（[run] と [<command>] セクション）")
        sub.add_argument("--seed", type=int, default=None, help="乱数シード（デフォルト: 0）")
        sub.add_argument("--out", default=None, help="出力ディレクトリ（デフォルト: out）")
        sub.add_argument(
            "--threads", type=int, default=None,
            help="スレッド数（未指定時は環境変数 SPECTRAGEN_THREADS、それも無ければ 1）",
        )
        for spec in specs:
            _add_param(sub, spec)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        print(f"[ERROR] 引数エラー: {e}", flush=True)
        return EXIT_USAGE

    try:
        specs = COMMANDS[args.command][1]
        cli_values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        config = resolve_config(args.command, specs, cli_values, args.config)

        print("=" * 60)
        print(f"spectragen {TOOL_VERSION}: {args.command}")
        print(f"出力先: {config.out} / シード: {config.seed} / スレッド: {config.threads}")
        print("=" * 60)

        write_resolved_config(config)
        result = run(args.command, config)
        manifest_path = write_manifest(build_manifest(config, result.inputs, result.outputs, result.extra), config.out)
        print(f"\n[OK] 処理完了! マニフェスト: {manifest_path}", flush=True)
        return EXIT_OK
    except UsageError as e:
        print(f"[ERROR] 設定エラー: {e}", flush=True)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"[ERROR] 数値エラー: {e}", flush=True)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        print(f"[ERROR] データエラー: {e}", flush=True)
        return EXIT_DATA


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n[ERROR] ユーザーによる中断")
        sys.exit(1)
    except Exception as e:
        print(f"\n[ERROR] 予期しないエラー: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
