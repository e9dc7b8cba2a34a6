"""
学習サービスモジュール - 教師あり事前学習、回答プローブ、評価、強化学習ループ
"""

import asyncio
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from tqdm import tqdm

from gc2po_lab.models import tensor as tc
from gc2po_lab.models.episode import parse_episodes
from gc2po_lab.models.policy import (
    ANSWER_HEAD_NAMES,
    PARAM_NAMES,
    POLICY_PARAM_NAMES,
    PolicyParams,
    forward,
    init_policy,
    load_checkpoint,
    sample_trajectory,
    save_checkpoint,
    sequence_logprobs,
)
from gc2po_lab.models.task import (
    SLICE_LONG,
    SLICE_PERM,
    SLICE_RANGE,
    ArithmeticTask,
    generate_task_set,
    shift_eval_set,
    verify,
)
from gc2po_lab.models.tensor import Tensor
from gc2po_lab.models.vocabulary import Vocabulary, build_vocabulary
from gc2po_lab.services.method_service import GroupCredit, TrainingMethod, get_training_method
from gc2po_lab.services.objective_service import (
    GroupBatch,
    NonFiniteGradientError,
    ObjectiveResult,
    OptimizerState,
    gc2po_objective,
    grad_norm,
    objective_gradients,
    update_step,
)
from gc2po_lab.services.report_service import (
    RESOLVED_CONFIG_FILE,
    TRAJECTORIES_FILE,
    DiagnosticRecord,
    MetricRecord,
    TrajectoryLog,
    diagnostics_writer,
    metrics_writer,
)
from gc2po_lab.services.rollout_service import GroupRollout, RolloutCollector
from gc2po_lab.utils.config import HyperParams, RunConfig, WarmupConfig, write_resolved

logger = logging.getLogger(__name__)

Decoder = Callable[[ArithmeticTask], Sequence[str]]

SLICE_IN = "in"
EVAL_SLICES = (SLICE_IN, SLICE_LONG, SLICE_RANGE, SLICE_PERM)


class TrainingAbortedError(RuntimeError):
    """目的関数または勾配が非有限になり学習を中断した"""


# --- 教師あり事前学習と回答プローブ ---


def _probe_logprobs(params: PolicyParams, rows: Tensor, targets: Sequence[int]) -> Tensor:
    """回答ヘッドによる log q(target | u) (行ごと)"""
    n = rows.shape[0]
    logits = rows @ params["w_answer"] + tc.take_rows(params["b_answer"], [0] * n)
    return tc.pick(tc.log_softmax(logits, axis=1), range(n), targets)


def _running_targets(vocab: Vocabulary, task: ArithmeticTask) -> list[int]:
    return [vocab.answer_index(str(v)) for v in task.intermediates]


def _supervised_term(params: PolicyParams, task: ArithmeticTask, probe_weight: float) -> Tensor:
    solution = task.canonical_solution()
    out = forward(params, task.question + solution)
    offset = len(task.question)
    rows = [offset + t - 1 for t in range(len(solution))]
    term = tc.mean(tc.pick(out.log_probs, rows, params.vocab.encode(solution)))
    if probe_weight > 0:
        seg = parse_episodes(solution)
        positions = [offset + span.end for span in seg.scored_spans]
        probe = _probe_logprobs(params, tc.take_rows(out.hidden, positions), _running_targets(params.vocab, task))
        term = term + tc.mean(probe) * probe_weight
    return term


def warm_start(
    params: PolicyParams, tasks: Sequence[ArithmeticTask], warmup: WarmupConfig, hyper: HyperParams, seed: int = 0
) -> PolicyParams:
    """正準解の教師強制学習と、各エピソード末尾での途中値プローブを同時に行う

    Returns:
        PolicyParams: 事前学習後のパラメータ (π_ref と θ の初期値になる)
    """
    if not tasks:
        raise ValueError("事前学習用の課題がありません")
    rng = np.random.default_rng(seed)
    state = OptimizerState()
    for step in range(warmup.steps):
        batch = [tasks[int(i)] for i in rng.integers(len(tasks), size=warmup.batch_size)]

        def objective(p: PolicyParams) -> ObjectiveResult:
            total = _supervised_term(p, batch[0], warmup.probe_weight)
            for task in batch[1:]:
                total = total + _supervised_term(p, task, warmup.probe_weight)
            return ObjectiveResult(value=total / float(len(batch)))

        result, grads = objective_gradients(params, objective)
        params = update_step(
            params, grads, state, hyper, trainable=PARAM_NAMES, learning_rate=warmup.learning_rate, weight_decay=0.0
        )
        if step % 50 == 0:
            logger.info("事前学習 step %d: 目的関数 %.4f", step, result.value.item())
    return params


def fit_answer_probe(
    params: PolicyParams,
    tasks: Sequence[ArithmeticTask],
    steps: int,
    hyper: HyperParams,
    learning_rate: float = 1e-2,
) -> PolicyParams:
    """表現を固定したまま回答ヘッドだけを途中値に当てはめ直す"""
    if not tasks:
        raise ValueError("プローブ学習用の課題がありません")
    features: list[tuple[Tensor, list[int]]] = []
    for task in tasks:
        solution = task.canonical_solution()
        out = forward(params, task.question + solution)
        positions = [len(task.question) + span.end for span in parse_episodes(solution).scored_spans]
        features.append((tc.constant(out.hidden.values[positions]), _running_targets(params.vocab, task)))

    state = OptimizerState()
    for _ in range(steps):

        def objective(p: PolicyParams) -> ObjectiveResult:
            total = tc.mean(_probe_logprobs(p, *features[0]))
            for rows, targets in features[1:]:
                total = total + tc.mean(_probe_logprobs(p, rows, targets))
            return ObjectiveResult(value=total / float(len(features)))

        _, grads = objective_gradients(params, objective)
        params = update_step(
            params, grads, state, hyper, trainable=ANSWER_HEAD_NAMES, learning_rate=learning_rate, weight_decay=0.0
        )
    return params


# --- 評価 ---


def greedy_decoder(params: PolicyParams, max_len: int = 48) -> Decoder:
    def decode(task: ArithmeticTask) -> Sequence[str]:
        return sample_trajectory(params, task.question, temperature=0.0, max_len=max_len).tokens

    return decode


def evaluate(source: PolicyParams | Decoder, tasks: Sequence[ArithmeticTask], max_len: int = 48) -> float:
    """貪欲デコードで R_out = 1 となった課題の割合 (pass@1)

    Args:
        source: 方策パラメータ、または課題からトークン列を返すデコーダ
        tasks: 評価用の課題
        max_len: 生成の最大長
    """
    if not tasks:
        raise ValueError("評価用の課題がありません")
    decode = greedy_decoder(source, max_len) if isinstance(source, PolicyParams) else source
    return sum(verify(decode(task), task) for task in tasks) / len(tasks)


def evaluate_checkpoint(
    path: Path, tasks: Sequence[ArithmeticTask], vocab: Vocabulary | None = None, max_len: int = 48
) -> float:
    params = load_checkpoint(path, vocab=vocab or build_vocabulary())
    return evaluate(params, tasks, max_len)


def evaluate_slices(
    params: PolicyParams, eval_sets: dict[str, list[ArithmeticTask]], max_len: int = 48
) -> dict[str, float]:
    return {name: evaluate(params, tasks, max_len) for name, tasks in eval_sets.items()}


# --- 強化学習ループ ---


@dataclass
class TaskSets:
    """1 シード分の学習課題と評価スライス"""

    train: list[ArithmeticTask]
    evaluation: dict[str, list[ArithmeticTask]]


def task_sequence(seed: int) -> np.random.SeedSequence:
    """課題生成用の乱数列 (Trainer.prepare の最初の子と同じ)"""
    return np.random.SeedSequence(seed).spawn(1)[0]


def build_task_sets(config: RunConfig, seed: np.random.SeedSequence) -> TaskSets:
    rng = np.random.default_rng(seed)
    train = generate_task_set(rng, config.task, config.task.train_questions)
    evaluation = {SLICE_IN: generate_task_set(rng, config.task, config.task.eval_questions)}
    evaluation.update(shift_eval_set(rng, config.task))
    return TaskSets(train=train, evaluation=evaluation)


@dataclass
class TrainResult:
    """1 シード分の学習結果"""

    seed: int
    method: str
    output_dir: Path
    metrics: list[MetricRecord] = field(default_factory=list)  # type: ignore
    diagnostics: list[DiagnosticRecord] = field(default_factory=list)  # type: ignore
    checkpoint: Path | None = None

    @property
    def final(self) -> MetricRecord:
        return self.metrics[-1]


def checkpoint_path(directory: Path, iteration: int) -> Path:
    return directory / f"checkpoint_{iteration:05d}.npz"


def _group_record(
    iteration: int, method: TrainingMethod, rollout: GroupRollout, credit: GroupCredit
) -> dict[str, Any]:
    trajectories: list[dict[str, Any]] = []
    for k, (traj, seg) in enumerate(zip(rollout.trajectories, rollout.segmented)):
        trajectories.append(
            {
                "tokens": list(traj.tokens),
                "spans": [[s.index, s.start, s.end] for s in seg.spans],
                "answer": traj.answer,
                "valid": seg.valid,
                "diagnostic": seg.diagnostic,
                "r_out": traj.r_out,
                "seed": traj.seed,
                "operator_seed": traj.extras.get("operator_seed"),
                "episodes": [b.to_record() for b in credit.breakdowns[k]] if credit.breakdowns else [],
                "advantage": float(credit.table.advantages[k]),
                "token_advantages": credit.table.token_advantages[k].tolist(),
            }
        )
    return {
        "iteration": iteration,
        "method": method.name,
        "question": list(rollout.task.question),
        "ground_truth": rollout.task.answer,
        "operator_seeds": [t["operator_seed"] for t in trajectories],
        "trajectories": trajectories,
    }


def _reward_means(credits: Sequence[GroupCredit]) -> tuple[float, float, float]:
    items = [b for c in credits for bs in c.breakdowns for b in bs]
    if not items:
        return 0.0, 0.0, 0.0
    return (
        float(np.mean([b.s_sta for b in items])),
        float(np.mean([b.s_exp for b in items])),
        float(np.mean([b.r_cf for b in items])),
    )


class Trainer:
    """1 シード分の学習を実行し、出力ディレクトリに記録を残す"""

    def __init__(self, config: RunConfig, seed: int, output_dir: Path, progress: bool = False) -> None:
        """
        Args:
            config: 実行設定
            seed: このシード
            output_dir: config.resolved / metrics.csv / trajectories.jsonl / チェックポイントの出力先
            progress: tqdm の進捗バーを表示するか
        """
        self.config = config
        self.seed = seed
        self.output_dir = output_dir
        self.progress = progress
        self.method = get_training_method(config.method)
        self.vocab = build_vocabulary()

    def prepare(self) -> tuple[TaskSets, PolicyParams, np.random.SeedSequence]:
        """課題生成と事前学習 (手法に依存しないのでシードが同じなら同じ結果になる)"""
        tasks_seq, init_seq, warm_seq, rollout_seq = np.random.SeedSequence(self.seed).spawn(4)
        task_sets = build_task_sets(self.config, tasks_seq)
        params = init_policy(
            self.vocab, hidden_dim=self.config.hyper.hidden_dim, seed=int(init_seq.generate_state(1)[0])
        )
        params = warm_start(
            params,
            task_sets.train,
            self.config.warmup,
            self.config.hyper,
            seed=int(warm_seq.generate_state(1)[0]),
        )
        return task_sets, params.snapshot(), rollout_seq

    async def run(self) -> TrainResult:
        config = self.config
        hyper = config.hyper
        self.output_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(config, self.output_dir / RESOLVED_CONFIG_FILE)

        task_sets, params, rollout_seq = self.prepare()
        reference = params.snapshot()
        state = OptimizerState()
        result = TrainResult(seed=self.seed, method=self.method.name, output_dir=self.output_dir)
        sampler = np.random.default_rng(rollout_seq.spawn(1)[0])
        iteration_seeds = rollout_seq.spawn(config.iterations)

        save_checkpoint(params, checkpoint_path(self.output_dir, 0))
        pass1 = evaluate_slices(params, task_sets.evaluation, hyper.max_len)

        with (
            metrics_writer(self.output_dir) as metrics_out,
            diagnostics_writer(self.output_dir) as diagnostics_out,
            TrajectoryLog(self.output_dir / TRAJECTORIES_FILE) as trajectory_log,
        ):
            record = MetricRecord(
                iteration=0,
                mean_r_out=0.0,
                pass1_in=pass1[SLICE_IN],
                pass1_long=pass1[SLICE_LONG],
                pass1_range=pass1[SLICE_RANGE],
                pass1_perm=pass1[SLICE_PERM],
                mean_s_sta=0.0,
                mean_s_exp=0.0,
                mean_r_cf=0.0,
                grad_norm=0.0,
                objective=0.0,
            )
            metrics_out.write(record)
            result.metrics.append(record)

            iterations = tqdm(
                range(1, config.iterations + 1), desc=f"{self.method.name} seed={self.seed}", disable=not self.progress
            )
            for iteration in iterations:
                started = time.perf_counter()
                batch_index = sampler.choice(len(task_sets.train), size=hyper.batch_size, replace=True)
                batch = [task_sets.train[int(i)] for i in batch_index]

                collector = RolloutCollector(params, hyper, max_workers=config.rollout_workers)
                rollouts = await collector.collect(batch, iteration_seeds[iteration - 1])
                credits = [self.method.assign_credit(params, g, config.perturbation, hyper) for g in rollouts]
                groups = [
                    GroupBatch(
                        trajectories=g.trajectories,
                        token_advantages=c.table.token_advantages,
                        ref_logprobs=[
                            sequence_logprobs(reference, t.question, t.tokens).values for t in g.trajectories
                        ],
                    )
                    for g, c in zip(rollouts, credits)
                ]
                for g, c in zip(rollouts, credits):
                    trajectory_log.write(_group_record(iteration, self.method, g, c))

                objective, grads = objective_gradients(params, lambda p: gc2po_objective(p, groups, hyper))
                value = objective.value.item()
                norm = grad_norm(grads)
                diagnostic = DiagnosticRecord(
                    iteration=iteration,
                    clip_frac_mean=objective.clip_fraction_mean,
                    clip_frac_max=objective.clip_fraction_max,
                    kl_mean=objective.kl_mean,
                    mean_episodes=float(np.mean([s.num_episodes for g in rollouts for s in g.segmented])),
                )
                diagnostics_out.write(diagnostic)
                result.diagnostics.append(diagnostic)

                try:
                    if not math.isfinite(value):
                        raise NonFiniteGradientError(f"目的関数が非有限値になりました: {value}")
                    params = update_step(params, grads, state, hyper, trainable=POLICY_PARAM_NAMES)
                except NonFiniteGradientError as err:
                    last_good = save_checkpoint(params, checkpoint_path(self.output_dir, iteration - 1))
                    result.checkpoint = last_good
                    logger.error("反復 %d で学習を中断しました: %s", iteration, err)
                    raise TrainingAbortedError(
                        f"反復 {iteration} で学習を中断しました ({err})。最後の正常なチェックポイント: {last_good}"
                    ) from err

                if iteration % config.eval_every == 0 or iteration == config.iterations:
                    pass1 = evaluate_slices(params, task_sets.evaluation, hyper.max_len)
                s_sta, s_exp, r_cf = _reward_means(credits)
                record = MetricRecord(
                    iteration=iteration,
                    mean_r_out=float(np.mean([r for g in rollouts for r in g.r_outs])),
                    pass1_in=pass1[SLICE_IN],
                    pass1_long=pass1[SLICE_LONG],
                    pass1_range=pass1[SLICE_RANGE],
                    pass1_perm=pass1[SLICE_PERM],
                    mean_s_sta=s_sta,
                    mean_s_exp=s_exp,
                    mean_r_cf=r_cf,
                    grad_norm=norm,
                    objective=value,
                    seconds=time.perf_counter() - started if config.log_wall_clock else 0.0,
                )
                metrics_out.write(record)
                result.metrics.append(record)

                if iteration % config.checkpoint_every == 0:
                    save_checkpoint(params, checkpoint_path(self.output_dir, iteration))

        result.checkpoint = save_checkpoint(params, self.output_dir / "final.npz")
        logger.info("学習が完了しました: %s (seed=%d)", self.method.name, self.seed)
        return result


def seed_output_dir(config: RunConfig, seed: int, root: Path | None = None) -> Path:
    """シードが複数なら seed_<n> のサブディレクトリに分ける"""
    base = root or config.resolve_output_dir()
    return base if len(config.seeds) == 1 else base / f"seed_{seed}"


async def train_async(config: RunConfig, output_dir: Path | None = None, progress: bool = False) -> list[TrainResult]:
    """設定中の全シードを順番に学習する"""
    config.validate()
    results: list[TrainResult] = []
    for seed in config.seeds:
        trainer = Trainer(config, seed, seed_output_dir(config, seed, output_dir), progress=progress)
        results.append(await trainer.run())
    return results


def train(config: RunConfig, output_dir: Path | None = None, progress: bool = False) -> list[TrainResult]:
    return asyncio.run(train_async(config, output_dir, progress))
