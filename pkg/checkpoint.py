#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
モデルチェックポイント
JSON マニフェスト（設定・パラメータ名・形状）と 32bit リトルエンディアンの生データを
同じステムの .json / .bin に保存する。RGAN と拡散モデルで共通。
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch
import torch.nn as nn

from numerics import DTYPE

CHECKPOINT_FORMAT = "spectragen-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: Dict
    state: Dict[str, torch.Tensor]


def checkpoint_paths(path: Union[str, Path]):
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(module: nn.Module, kind: str, config: Dict, path: Union[str, Path]) -> Path:
    """
    Args:
        module: 保存するモデル
        kind: モデル種別（"rgan" / "diffusion"）
        config: モデル再構築用の設定（JSON 化可能な dict）
        path: 保存先（拡張子は .json / .bin に置き換えられる）

    Returns:
        マニフェストのパス
    """
    manifest_path, payload_path = checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    with open(payload_path, "wb") as f:
        for name, tensor in module.state_dict().items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "dtype": "f32le",
        "payload": payload_path.name,
        "parameters": entries,
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
    return manifest_path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    manifest_path, _ = checkpoint_paths(path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"チェックポイント形式が不正です: {manifest_path}")

    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    state = {}
    for entry in manifest["parameters"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + count * 4
        if end > len(payload):
            raise ValueError(f"パラメータ {entry['name']} がペイロード外を指しています")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float64)).to(DTYPE)
    return Checkpoint(manifest["kind"], manifest["config"], state)
