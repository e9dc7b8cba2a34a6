"""
設定モジュール - 実行設定の定義と TOML/JSON からの読み込み
"""

import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from gc2po_lab.models.policy import DEFAULT_MAX_POSITIONS
from gc2po_lab.models.vocabulary import MAX_EPISODES
from gc2po_lab.services.perturbation_service import PerturbationSpec

logger = logging.getLogger(__name__)

METHOD_GRPO = "grpo"
METHOD_GC2PO = "gc2po"
METHOD_NO_S_EXP = "no-s_exp"
METHOD_NO_S_STA = "no-s_sta"
METHOD_NO_R_CF = "no-r_cf"
METHOD_NAMES = (METHOD_GRPO, METHOD_GC2PO, METHOD_NO_S_EXP, METHOD_NO_S_STA, METHOD_NO_R_CF)

# 分布シフト評価の long スライスは学習の最長チェーンよりこれだけ長い
LONG_CHAIN_EXTRA = 2

OUTPUT_ROOT_ENV = "GC2PO_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "output"


class ConfigError(ValueError):
    """設定ファイルの内容が不正"""


@dataclass
class HyperParams:
    """手法のスカラー設定一式"""

    group_size: int = 8
    num_perturbations: int = 8
    eps_clip: float = 0.2
    beta_kl: float = 0.04
    tau: float = 0.5
    eps_u: float = 1e-6
    lambda_exp: float = 0.9
    lambda_cf: float = 0.8
    trim_fraction: float = 0.1
    eps_std: float = 1e-8
    eps_r: float = 1e-8
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    temperature: float = 1.0
    max_len: int = 48
    hidden_dim: int = 32

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError(f"group_size (K) は 2 以上である必要があります: {self.group_size}")
        if self.num_perturbations < 1:
            raise ConfigError(f"num_perturbations (M) は 1 以上である必要があります: {self.num_perturbations}")
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError(f"eps_clip は (0, 1) の範囲である必要があります: {self.eps_clip}")
        if self.beta_kl < 0:
            raise ConfigError(f"beta_kl は 0 以上である必要があります: {self.beta_kl}")
        for name in ("tau", "eps_u"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} は正である必要があります: {getattr(self, name)}")
        for name in ("lambda_exp", "lambda_cf", "eps_std", "eps_r", "learning_rate", "weight_decay", "temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} は 0 以上である必要があります: {getattr(self, name)}")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigError(f"trim_fraction は [0, 0.5) の範囲である必要があります: {self.trim_fraction}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0) or self.adam_eps <= 0:
            raise ConfigError("Adam の設定 (adam_beta1, adam_beta2, adam_eps) が不正です")
        for name in ("batch_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} は 1 以上である必要があります: {getattr(self, name)}")
        if self.hidden_dim < 2:
            raise ConfigError(f"hidden_dim は 2 以上である必要があります: {self.hidden_dim}")


@dataclass
class TaskConfig:
    """課題生成の設定"""

    train_questions: int = 64
    eval_questions: int = 64
    chain_lengths: tuple[int, ...] = (2, 3, 4)
    operand_range: tuple[int, int] = (1, 6)
    shift_operand_range: tuple[int, int] = (7, 9)

    @property
    def longest_chain(self) -> int:
        """評価で使う最長のチェーン (long スライス)"""
        return max(self.chain_lengths) + LONG_CHAIN_EXTRA

    @property
    def max_question_length(self) -> int:
        """<q> s (#i op n)×L </q> の最大トークン数"""
        return 3 * self.longest_chain + 3

    def validate(self) -> None:
        if self.train_questions < 1 or self.eval_questions < 1:
            raise ConfigError("train_questions と eval_questions は 1 以上である必要があります")
        if not self.chain_lengths or min(self.chain_lengths) < 1:
            raise ConfigError(f"chain_lengths が不正です: {self.chain_lengths}")
        if self.longest_chain > MAX_EPISODES:
            raise ConfigError(
                f"chain_lengths の最大値 + {LONG_CHAIN_EXTRA} (long スライス) が"
                f"語彙のエピソード数 {MAX_EPISODES} を超えています: {self.chain_lengths}"
            )
        for name in ("operand_range", "shift_operand_range"):
            value = getattr(self, name)
            if len(value) != 2 or not 0 <= value[0] <= value[1] <= 9:
                raise ConfigError(f"{name} は 0〜9 の [下限, 上限] である必要があります: {value}")
        low, high = self.operand_range
        shift_low, shift_high = self.shift_operand_range
        if not (shift_high < low or shift_low > high):
            raise ConfigError("shift_operand_range は operand_range と重ならない範囲である必要があります")


@dataclass
class WarmupConfig:
    """正準解による教師あり事前学習と回答プローブの設定"""

    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-2
    probe_weight: float = 1.0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"warmup.steps は 0 以上である必要があります: {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"warmup.batch_size は 1 以上である必要があります: {self.batch_size}")
        if self.learning_rate < 0 or self.probe_weight < 0:
            raise ConfigError("warmup.learning_rate と warmup.probe_weight は 0 以上である必要があります")


@dataclass
class RunConfig:
    """1 回の実行設定"""

    method: str = METHOD_GC2PO
    iterations: int = 200
    seeds: tuple[int, ...] = (0,)
    output_dir: str = ""
    checkpoint_every: int = 50
    eval_every: int = 10
    log_wall_clock: bool = False
    parallel_seeds: bool = False
    rollout_workers: int = 4
    hyper: HyperParams = field(default_factory=HyperParams)
    task: TaskConfig = field(default_factory=TaskConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    def validate(self) -> None:
        if self.method not in METHOD_NAMES:
            raise ConfigError(f"サポートされていない手法です: {self.method} (選択肢: {', '.join(METHOD_NAMES)})")
        if not self.seeds:
            raise ConfigError("seeds が空です")
        if self.iterations < 0:
            raise ConfigError(f"iterations は 0 以上である必要があります: {self.iterations}")
        if self.checkpoint_every < 1 or self.eval_every < 1 or self.rollout_workers < 1:
            raise ConfigError("checkpoint_every, eval_every, rollout_workers は 1 以上である必要があります")
        self.hyper.validate()
        self.task.validate()
        self.warmup.validate()
        try:
            self.perturbation.validate()
        except ValueError as err:
            raise ConfigError(f"perturbation の設定が不正です: {err}") from err
        if self.perturbation.count != self.hyper.num_perturbations:
            raise ConfigError(
                f"perturbation.count ({self.perturbation.count}) と "
                f"hyper.num_perturbations ({self.hyper.num_perturbations}) が一致しません"
            )
        if self.task.max_question_length + self.hyper.max_len > DEFAULT_MAX_POSITIONS:
            raise ConfigError(
                f"最長の質問 ({self.task.max_question_length} トークン) と hyper.max_len ({self.hyper.max_len}) の合計が"
                f"方策の最大位置数 {DEFAULT_MAX_POSITIONS} を超えています"
            )

    def resolve_output_dir(self) -> Path:
        """出力先。未指定なら環境変数 GC2PO_OUTPUT_ROOT 配下に手法名で作る"""
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.method


SECTIONS: dict[str, type[Any]] = {
    "hyper": HyperParams,
    "task": TaskConfig,
    "warmup": WarmupConfig,
    "perturbation": PerturbationSpec,
}


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    where = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} は真偽値である必要があります: {value!r}")
        return value
    if isinstance(default, int) or (default is None and isinstance(value, int)):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} は整数である必要があります: {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} は数値である必要があります: {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} は文字列である必要があります: {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} は配列である必要があります: {value!r}")
        items = tuple(value)  # type: ignore
        if any(isinstance(v, bool) or not isinstance(v, int) for v in items):
            raise ConfigError(f"{where} の要素は整数である必要があります: {value!r}")
        return items
    return value


def _build(cls: type[Any], data: Mapping[str, Any], section: str) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"[{section}] " if section else ""
        raise ConfigError(f"{where}不明な設定キーです: {', '.join(unknown)}")
    defaults = cls()
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        if name in SECTIONS and not section:
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{name}] はテーブルである必要があります")
            kwargs[name] = _build(SECTIONS[name], value, name)  # type: ignore
        else:
            kwargs[name] = _coerce(section, name, value, getattr(defaults, name))
    return cls(**kwargs)


def config_from_mapping(data: Mapping[str, Any]) -> RunConfig:
    """辞書から RunConfig を組み立てて検証する"""
    hyper = data.get("hyper", {})
    perturbation = data.get("perturbation", {})
    if isinstance(hyper, Mapping) and isinstance(perturbation, Mapping):
        # M の指定が片方だけなら、もう片方もそれに合わせる
        if "num_perturbations" in hyper and "count" not in perturbation:
            data = {**data, "perturbation": {**perturbation, "count": hyper["num_perturbations"]}}
        elif "count" in perturbation and "num_perturbations" not in hyper:
            data = {**data, "hyper": {**hyper, "num_perturbations": perturbation["count"]}}
    config: RunConfig = _build(RunConfig, data, "")
    config.validate()
    return config


def load_config(path: Path) -> RunConfig:
    """TOML (.toml) または JSON の設定ファイルを読み込む

    Args:
        path: 設定ファイルのパス

    Returns:
        RunConfig: 既定値で補完・検証済みの設定
    """
    if not path.exists():
        raise ConfigError(f"設定ファイルが見つかりません: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as err:
        raise ConfigError(f"設定ファイルを解析できません: {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"設定ファイルの最上位はテーブルである必要があります: {path}")
    logger.info("設定ファイルを読み込みました: %s", path)
    return config_from_mapping(data)  # type: ignore


def resolved_dict(config: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(config)


def write_resolved(config: RunConfig, path: Path) -> Path:
    """既定値まで展開した設定を config.resolved (JSON) として書き出す"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved_dict(config), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path
