"""
分析サービスモジュール - 報酬と (f, p) の相関分析、複数シードでの手法比較、λ の掃引、ログからの報酬再計算
"""

import abc
import asyncio
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import pearsonr

from gc2po_lab.models.episode import EpisodeSpan, SegmentedTrajectory, parse_episodes
from gc2po_lab.models.policy import PolicyParams
from gc2po_lab.models.task import GROUPS, LabeledTrajectory, generate_task_set, synthesize_groups
from gc2po_lab.services.method_service import GC2POMethod, get_training_method
from gc2po_lab.services.perturbation_service import PerturbationSpec
from gc2po_lab.services.reward_service import CfRewardBreakdown, trajectory_cf_rewards
from gc2po_lab.services.train_service import EVAL_SLICES, SLICE_IN, Trainer, TrainResult, fit_answer_probe
from gc2po_lab.utils.config import METHOD_GC2PO, HyperParams, RunConfig, TaskConfig

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ("lambda_exp", "lambda_cf")


# --- 報酬の相関分析 ---


class RewardScorer(abc.ABC):
    """ラベル付き軌跡に報酬値を 1 つ割り当てる"""

    name: str = ""

    @abc.abstractmethod
    def score(self, item: LabeledTrajectory) -> float:
        pass


class OutcomeScorer(RewardScorer):
    """結果報酬 R_out"""

    name = "r_out"

    def score(self, item: LabeledTrajectory) -> float:
        return float(item.trajectory.r_out)


class CfRewardScorer(RewardScorer):
    """エピソードごとの R̂_cf の平均 (採点対象のエピソードがなければ 0)"""

    name = "r_cf"

    def __init__(self, params: PolicyParams, spec: PerturbationSpec, hyper: HyperParams, seed: int = 0) -> None:
        self.params = params
        self.spec = spec
        self.hyper = hyper
        self.seed = seed

    def score(self, item: LabeledTrajectory) -> float:
        breakdowns = trajectory_cf_rewards(
            self.params, item.trajectory.question, item.segmented, self.spec, self.hyper, self.seed
        )
        return float(np.mean([b.r_cf for b in breakdowns])) if breakdowns else 0.0


@dataclass
class Correlation:
    value: float | None

    @property
    def defined(self) -> bool:
        return self.value is not None


@dataclass
class RewardReport:
    """報酬ごとの cor(R, f), cor(R, p) と 4 群ごとの平均報酬"""

    correlations: dict[str, dict[str, Correlation]] = field(default_factory=dict)  # type: ignore
    group_means: dict[str, dict[str, float]] = field(default_factory=dict)  # type: ignore
    flags: list[str] = field(default_factory=list)  # type: ignore

    def rows(self) -> list[dict[str, Any]]:
        rows: list[dict[str, Any]] = []
        for reward, cors in self.correlations.items():
            row: dict[str, Any] = {"reward": reward}
            for label, cor in cors.items():
                row[f"cor_{label}"] = "undefined" if cor.value is None else cor.value
            for group in GROUPS:
                row[f"mean_{group}"] = self.group_means[reward].get(group, float("nan"))
            rows.append(row)
        return rows


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """ピアソン相関。どちらかが定数列なら定義されないので None"""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.size != b.size:
        raise ValueError(f"系列の長さが一致しません: {a.size} != {b.size}")
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    r, _ = pearsonr(a, b)
    return float(r)


def analyze_rewards(items: Sequence[LabeledTrajectory], scorers: Sequence[RewardScorer]) -> RewardReport:
    """各報酬と最終正解 f・過程妥当性 p との相関、および 4 群ごとの平均

    Args:
        items: (f, p) ラベル付きの軌跡
        scorers: 評価する報酬 (R_out, R̂_cf など)
    """
    if not items:
        raise ValueError("分析対象の軌跡がありません")
    finals = [float(item.final_correct) for item in items]
    validities = [item.validity for item in items]
    report = RewardReport()
    for scorer in scorers:
        values = [scorer.score(item) for item in items]
        report.correlations[scorer.name] = {}
        for label, target in (("f", finals), ("p", validities)):
            cor = Correlation(pearson(values, target))
            if not cor.defined:
                report.flags.append(f"cor({scorer.name}, {label}) は定数列のため定義されません")
            report.correlations[scorer.name][label] = cor
        report.group_means[scorer.name] = {
            group: float(np.mean([v for v, item in zip(values, items) if item.group == group]))
            for group in GROUPS
            if any(item.group == group for item in items)
        }
    return report


def analyze_checkpoint(
    params: PolicyParams,
    per_group: int,
    spec: PerturbationSpec,
    hyper: HyperParams,
    task_config: TaskConfig,
    seed: int = 0,
    probe_steps: int = 200,
) -> RewardReport:
    """4 群の合成データを作り、回答プローブを当てはめ直してから R_out と R̂_cf を比べる"""
    rng = np.random.default_rng(seed)
    items = synthesize_groups(rng, per_group, task_config.chain_lengths, task_config.operand_range)
    probe_tasks = generate_task_set(rng, task_config, task_config.train_questions)
    if probe_steps > 0:
        params = fit_answer_probe(params, probe_tasks, probe_steps, hyper)
    return analyze_rewards(items, [OutcomeScorer(), CfRewardScorer(params, spec, hyper, seed)])


# --- 手法比較と λ の掃引 ---


def _run_seed(config: RunConfig, seed: int, output_dir: Path) -> TrainResult:
    return asyncio.run(Trainer(config, seed, output_dir).run())


async def run_seeds(
    config: RunConfig, output_dir: Path, parallel: bool = False, max_workers: int | None = None
) -> list[TrainResult]:
    """config.seeds の全シードを学習する (既定は逐次、parallel なら別プロセス)"""
    dirs = [output_dir / f"seed_{seed}" for seed in config.seeds]
    if not parallel:
        return [await Trainer(config, seed, d).run() for seed, d in zip(config.seeds, dirs)]
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=max_workers) as executor:
        futures = [loop.run_in_executor(executor, _run_seed, config, seed, d) for seed, d in zip(config.seeds, dirs)]
        return list(await asyncio.gather(*futures))


def summarize(label_key: str, label: Any, results: Sequence[TrainResult]) -> dict[str, Any]:
    """最終反復の pass@1 をスライスごとに平均 ± 標準偏差でまとめる"""
    row: dict[str, Any] = {label_key: label, "seeds": len(results)}
    shifted: list[float] = []
    for name in EVAL_SLICES:
        values = [getattr(r.final, f"pass1_{name}") for r in results]
        row[f"pass1_{name}_mean"] = float(np.mean(values))
        row[f"pass1_{name}_std"] = float(np.std(values))
    for r in results:
        shifted.append(float(np.mean([getattr(r.final, f"pass1_{n}") for n in EVAL_SLICES if n != SLICE_IN])))
    row["pass1_shifted_mean"] = float(np.mean(shifted))
    row["pass1_shifted_std"] = float(np.std(shifted))
    return row


async def compare(
    config: RunConfig, methods: Sequence[str], output_dir: Path, parallel: bool = False
) -> list[dict[str, Any]]:
    """手法ごとに全シードを学習し、スライスごとの pass@1 を集計する"""
    rows: list[dict[str, Any]] = []
    for method in methods:
        name = get_training_method(method).name
        variant = dataclasses.replace(config, method=name)
        variant.validate()
        logger.info("手法 %s を %d シードで学習します", name, len(config.seeds))
        results = await run_seeds(variant, output_dir / name, parallel=parallel)
        rows.append(summarize("method", name, results))
    return rows


async def sweep(
    config: RunConfig, param: str, values: Sequence[float], output_dir: Path, parallel: bool = False
) -> list[dict[str, Any]]:
    """λ_exp または λ_cf を変えながら GC²PO を学習する"""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"サポートされていない掃引対象です: {param} (選択肢: {', '.join(SWEEP_PARAMS)})")
    if not values:
        raise ValueError("掃引する値がありません")
    rows: list[dict[str, Any]] = []
    for value in values:
        hyper = dataclasses.replace(config.hyper, **{param: float(value)})
        variant = dataclasses.replace(config, method=METHOD_GC2PO, hyper=hyper)
        variant.validate()
        results = await run_seeds(variant, output_dir / f"{param}_{value}", parallel=parallel)
        rows.append(summarize(param, float(value), results))
    return rows


# --- ログからの再計算 ---


def _segmented_from_record(trajectory: Mapping[str, Any]) -> SegmentedTrajectory:
    seg = parse_episodes(trajectory["tokens"])
    logged = [EpisodeSpan(index=i, start=s, end=e) for i, s, e in trajectory["spans"]]
    if logged != seg.spans:
        raise ValueError("ログのエピソード範囲が再分割の結果と一致しません")
    return seg


def replay_group(
    record: Mapping[str, Any], params: PolicyParams, spec: PerturbationSpec, hyper: HyperParams
) -> list[list[CfRewardBreakdown]]:
    """trajectories.jsonl の 1 行から、記録された作用素シードで各エピソードの内訳を再計算する

    params はその反復の θ_old (直前の反復のチェックポイント) を渡す。
    """
    method = get_training_method(str(record["method"]))
    if not isinstance(method, GC2POMethod) or not method.uses_cf_reward:
        return [[] for _ in record["trajectories"]]
    replayed: list[list[CfRewardBreakdown]] = []
    for trajectory in record["trajectories"]:
        seg = _segmented_from_record(trajectory)
        if not seg.valid:
            replayed.append([])
            continue
        replayed.append(
            trajectory_cf_rewards(
                params,
                tuple(record["question"]),
                seg,
                spec,
                hyper,
                int(trajectory["operator_seed"]),
                use_stability=method.use_stability,
                use_expressiveness=method.use_expressiveness,
            )
        )
    return replayed


def replay_deviation(record: Mapping[str, Any], replayed: Sequence[Sequence[CfRewardBreakdown]]) -> float:
    """記録値と再計算値の最大絶対誤差"""
    deviation = 0.0
    for trajectory, items in zip(record["trajectories"], replayed):
        logged = trajectory["episodes"]
        if len(logged) != len(items):
            raise ValueError(f"エピソード数が一致しません: {len(logged)} != {len(items)}")
        for entry, item in zip(logged, items):
            for key in ("s_sta", "s_exp", "r_cf"):
                deviation = max(deviation, abs(float(entry[key]) - getattr(item, key)))
    return deviation
