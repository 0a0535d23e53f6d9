#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
実行設定とマニフェスト
INI 設定ファイル + コマンドライン上書きの解決、スレッド数の決定、
再現性確認用のマニフェスト（入出力ダイジェスト）の作成
"""

import configparser
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch

TOOL_NAME = "spectragen"
TOOL_VERSION = "0.1.0"
THREADS_ENV = "SPECTRAGEN_THREADS"
RESOLVED_CONFIG_NAME = "resolved_config.ini"
MANIFEST_NAME = "manifest.json"

PathLike = Union[str, Path]


class UsageError(Exception):
    """設定ファイルやコマンドライン引数の誤り"""


@dataclass(frozen=True)
class ParamSpec:
    """サブコマンドのパラメータ定義（CLI フラグと INI キーの両方に使う）"""

    name: str
    type: type
    default: Any = None
    help: str = ""
    choices: Optional[Tuple] = None
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def parse(self, raw: Any) -> Any:
        if raw is None or not isinstance(raw, str):
            value = raw
        elif self.type is bool:
            lowered = raw.strip().lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise UsageError(f"{self.name} には真偽値を指定してください: {raw}")
            value = lowered in ("1", "true", "yes", "on")
        else:
            try:
                value = self.type(raw.strip())
            except ValueError as e:
                raise UsageError(f"{self.name} の値が不正です: {raw}") from e
        if value is not None and self.choices and value not in self.choices:
            raise UsageError(f"{self.name} は {', '.join(map(str, self.choices))} のいずれかです: {value}")
        return value


RUN_PARAMS = (
    ParamSpec("seed", int, 0, "乱数シード（デフォルト: 0）"),
    ParamSpec("out", str, "out", "出力ディレクトリ（デフォルト: out）"),
    ParamSpec("threads", int, None, f"スレッド数（未指定時は環境変数 {THREADS_ENV}、それも無ければ 1）"),
)


@dataclass
class RunConfig:
    command: str
    params: Dict[str, Any]
    seed: int = 0
    out: Path = Path("out")
    threads: int = 1
    config_path: Optional[Path] = None

    def __getitem__(self, key: str) -> Any:
        return self.params[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)

    def to_ini(self, reproducible: bool = False) -> str:
        """
        解決済み設定を INI テキストにする。reproducible=True なら出力先とスレッド数を除く
        （どちらも成果物の中身に影響しないため）
        """
        parser = configparser.ConfigParser(interpolation=None)
        run = {"seed": str(self.seed)}
        if not reproducible:
            run["out"] = str(self.out)
            run["threads"] = str(self.threads)
        parser["run"] = run
        parser[self.command] = {k: _format_value(v) for k, v in sorted(self.params.items()) if v is not None}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    @property
    def run_id(self) -> str:
        return hashlib.sha256(self.to_ini(reproducible=True).encode("utf-8")).hexdigest()[:16]


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def resolve_threads(value: Optional[int] = None) -> int:
    """--threads → 環境変数 SPECTRAGEN_THREADS → 1 の順に決め、torch のスレッド数にも反映"""
    if value is None:
        raw = os.environ.get(THREADS_ENV)
        if raw:
            try:
                value = int(raw)
            except ValueError as e:
                raise UsageError(f"環境変数 {THREADS_ENV} の値が不正です: {raw}") from e
        else:
            value = 1
    if value < 1:
        raise UsageError(f"スレッド数は 1 以上である必要があります: {value}")
    torch.set_num_threads(value)
    return value


def resolve_config(
    command: str,
    specs: Sequence[ParamSpec],
    cli_values: Dict[str, Any],
    config_path: Optional[PathLike] = None,
) -> RunConfig:
    """
    デフォルト < 設定ファイル < コマンドライン の優先順で設定を解決

    Args:
        command: サブコマンド名（INI のセクション名）
        specs: サブコマンド固有のパラメータ定義
        cli_values: argparse の結果（未指定は None）
        config_path: INI 設定ファイル

    Raises:
        UsageError: 設定ファイルが無い、未知のキー、型やchoicesの違反、必須値の欠落
    """
    all_specs = {s.name: s for s in (*RUN_PARAMS, *specs)}
    values = {name: spec.default for name, spec in all_specs.items()}

    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.is_file():
            raise UsageError(f"設定ファイルが見つかりません: {config_path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(config_path, encoding="utf-8")
        except configparser.Error as e:
            raise UsageError(f"設定ファイルを解釈できません: {config_path} ({e})") from e
        for section, allowed in (("run", RUN_PARAMS), (command, specs)):
            if not parser.has_section(section):
                continue
            names = {s.name: s for s in allowed}
            for key, raw in parser.items(section):
                name = key.replace("-", "_")
                if name not in names:
                    raise UsageError(f"[{section}] に未知のキーがあります: {key}")
                values[name] = names[name].parse(raw)

    for name, raw in cli_values.items():
        if name in all_specs and raw is not None:
            values[name] = all_specs[name].parse(raw)

    missing = [s.flag for s in specs if s.required and values.get(s.name) in (None, "")]
    if missing:
        raise UsageError(f"必須パラメータが指定されていません: {', '.join(missing)}")

    return RunConfig(
        command=command,
        params={s.name: values[s.name] for s in specs},
        seed=int(values["seed"]),
        out=Path(values["out"]),
        threads=resolve_threads(values["threads"]),
        config_path=config_path,
    )


def write_resolved_config(config: RunConfig) -> Path:
    config.out.mkdir(parents=True, exist_ok=True)
    path = config.out / RESOLVED_CONFIG_NAME
    path.write_text(config.to_ini(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# マニフェスト
# ---------------------------------------------------------------------------
def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _relative(path: Path, out: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), out.resolve())).as_posix()


@dataclass
class Manifest:
    run_id: str
    command: str
    seed: int
    inputs: List[Dict[str, str]] = field(default_factory=list)
    outputs: List[Dict[str, str]] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "tool": TOOL_NAME,
            "tool_version": self.tool_version,
            "run_id": self.run_id,
            "command": self.command,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        if self.extra:
            data["extra"] = self.extra
        return data


def build_manifest(
    config: RunConfig,
    inputs: Sequence[PathLike],
    outputs: Sequence[PathLike],
    extra: Optional[Dict[str, Any]] = None,
) -> Manifest:
    """入出力ファイルのダイジェストを --out からの相対パスで記録（タイムスタンプは含めない）"""

    def entries(paths):
        rows = [{"path": _relative(Path(p), config.out), "sha256": file_digest(p)} for p in paths]
        return sorted(rows, key=lambda r: r["path"])

    return Manifest(config.run_id, config.command, config.seed, entries(inputs), entries(outputs), dict(extra or {}))


def write_manifest(manifest: Manifest, out: PathLike) -> Path:
    path = Path(out) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path
