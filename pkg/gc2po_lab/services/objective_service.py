"""
目的関数サービスモジュール - クリップ付き代理目的関数 (GC²PO / GRPO)、KL 推定量、AdamW 更新
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gc2po_lab.models import tensor as tc
from gc2po_lab.models.policy import POLICY_PARAM_NAMES, PolicyParams, Trajectory, sequence_logprobs
from gc2po_lab.models.tensor import FloatArray, Tensor
from gc2po_lab.services.credit_service import grpo_credit_table
from gc2po_lab.utils.config import HyperParams

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """勾配に NaN / inf が含まれている"""


def kl_estimate(log_ratio: FloatArray | float) -> FloatArray:
    """μ_KL = r - log r - 1 (log r = log π_ref - log π_θ)"""
    x = np.asarray(log_ratio, dtype=np.float64)
    return np.exp(x) - x - 1.0


def token_ratios(params: PolicyParams, trajectory: Trajectory) -> Tensor:
    """ρ_{k,t} = exp(log π_θ - log π_old) (θ について微分可能)"""
    logprobs = sequence_logprobs(params, trajectory.question, trajectory.tokens)
    return tc.exp(logprobs - tc.constant(trajectory.old_logprobs))


def prob_ratio(params: PolicyParams, trajectory: Trajectory, t: int) -> float:
    if not 0 <= t < trajectory.length:
        raise IndexError(f"位置 {t} は軌跡の範囲外です (長さ {trajectory.length})")
    return float(token_ratios(params, trajectory).values[t])


def kl_penalty(params: PolicyParams, ref_params: PolicyParams, trajectory: Trajectory, t: int) -> float:
    if not 0 <= t < trajectory.length:
        raise IndexError(f"位置 {t} は軌跡の範囲外です (長さ {trajectory.length})")
    current = sequence_logprobs(params, trajectory.question, trajectory.tokens).values[t]
    reference = sequence_logprobs(ref_params, trajectory.question, trajectory.tokens).values[t]
    return float(kl_estimate(reference - current))


@dataclass
class GroupBatch:
    """1 つの質問に対する K 本の候補と、目的関数に必要な定数"""

    trajectories: list[Trajectory]
    token_advantages: list[FloatArray]
    ref_logprobs: list[FloatArray]

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError("候補が 1 つもないグループです")
        if not (len(self.trajectories) == len(self.token_advantages) == len(self.ref_logprobs)):
            raise ValueError("グループ内の候補数が入力ごとに一致しません")
        for traj, adv, ref in zip(self.trajectories, self.token_advantages, self.ref_logprobs):
            if len(adv) != traj.length or len(ref) != traj.length:
                raise ValueError(f"アドバンテージまたは参照対数確率の長さが軌跡長 {traj.length} と一致しません")


@dataclass
class ObjectiveResult:
    """目的関数値 J と安定性の診断値"""

    value: Tensor
    clip_fractions: list[float] = field(default_factory=list)  # type: ignore
    kl_means: list[float] = field(default_factory=list)  # type: ignore

    @property
    def clip_fraction_mean(self) -> float:
        return float(np.mean(self.clip_fractions)) if self.clip_fractions else 0.0

    @property
    def clip_fraction_max(self) -> float:
        return float(np.max(self.clip_fractions)) if self.clip_fractions else 0.0

    @property
    def kl_mean(self) -> float:
        return float(np.mean(self.kl_means)) if self.kl_means else 0.0


def _trajectory_term(
    params: PolicyParams, trajectory: Trajectory, advantages: FloatArray, ref_logprobs: FloatArray, hyper: HyperParams
) -> tuple[Tensor, float, float]:
    logprobs = sequence_logprobs(params, trajectory.question, trajectory.tokens)
    ratio = tc.exp(logprobs - tc.constant(trajectory.old_logprobs))
    adv = tc.constant(advantages)
    surrogate = tc.minimum(ratio * adv, tc.clip(ratio, 1.0 - hyper.eps_clip, 1.0 + hyper.eps_clip) * adv)
    log_ref_ratio = tc.constant(ref_logprobs) - logprobs
    kl = tc.exp(log_ref_ratio) - log_ref_ratio - 1.0
    term = tc.mean(surrogate - kl * hyper.beta_kl)

    clipped = np.abs(ratio.values - 1.0) > hyper.eps_clip
    return term, float(np.mean(clipped)), float(np.mean(kl.values))


def group_surrogate(params: PolicyParams, group: GroupBatch, hyper: HyperParams) -> ObjectiveResult:
    """(1/K) Σ_k (1/T_k) Σ_t [min(ρA, clip(ρ)A) - β_KL·μ_KL]"""
    terms: list[Tensor] = []
    clip_fractions: list[float] = []
    kl_means: list[float] = []
    for traj, adv, ref in zip(group.trajectories, group.token_advantages, group.ref_logprobs):
        term, clip_fraction, kl_mean = _trajectory_term(params, traj, adv, ref, hyper)
        terms.append(term)
        clip_fractions.append(clip_fraction)
        kl_means.append(kl_mean)
    value = terms[0]
    for term in terms[1:]:
        value = value + term
    return ObjectiveResult(value=value / float(len(terms)), clip_fractions=clip_fractions, kl_means=kl_means)


def _batch_mean(results: list[ObjectiveResult]) -> ObjectiveResult:
    value = results[0].value
    for r in results[1:]:
        value = value + r.value
    return ObjectiveResult(
        value=value / float(len(results)),
        clip_fractions=[c for r in results for c in r.clip_fractions],
        kl_means=[k for r in results for k in r.kl_means],
    )


def gc2po_objective(params: PolicyParams, groups: Sequence[GroupBatch], hyper: HyperParams) -> ObjectiveResult:
    """トークン単位アドバンテージ A_{k,t} によるクリップ付き目的関数 (質問について平均)"""
    if not groups:
        raise ValueError("空のバッチです")
    return _batch_mean([group_surrogate(params, g, hyper) for g in groups])


def grpo_groups(
    trajectories: Sequence[Sequence[Trajectory]], ref_logprobs: Sequence[Sequence[FloatArray]], hyper: HyperParams
) -> list[GroupBatch]:
    """結果報酬から系列定数のアドバンテージを作ってグループにまとめる"""
    groups: list[GroupBatch] = []
    for trajs, refs in zip(trajectories, ref_logprobs):
        table = grpo_credit_table([t.r_out for t in trajs], [t.length for t in trajs], hyper)
        groups.append(GroupBatch(trajectories=list(trajs), token_advantages=table.token_advantages, ref_logprobs=list(refs)))
    return groups


def grpo_objective(
    params: PolicyParams,
    trajectories: Sequence[Sequence[Trajectory]],
    ref_logprobs: Sequence[Sequence[FloatArray]],
    hyper: HyperParams,
) -> ObjectiveResult:
    """結果報酬のグループ相対アドバンテージを全トークンに配る基準手法"""
    if not trajectories or any(len(t) == 0 for t in trajectories):
        raise ValueError("空のバッチです")
    return gc2po_objective(params, grpo_groups(trajectories, ref_logprobs, hyper), hyper)


def objective_gradients(
    params: PolicyParams, objective: Callable[[PolicyParams], ObjectiveResult]
) -> tuple[ObjectiveResult, dict[str, FloatArray]]:
    """テープ上で目的関数を評価し、全パラメータの勾配を返す"""
    trainable = params.snapshot(trainable=True)
    with tc.Tape() as tape:
        result = objective(trainable)
    tc.backward(tape, result.value)
    return result, trainable.gradients()


@dataclass
class OptimizerState:
    """AdamW のモーメント"""

    step: int = 0
    first_moment: dict[str, FloatArray] = field(default_factory=dict)  # type: ignore
    second_moment: dict[str, FloatArray] = field(default_factory=dict)  # type: ignore


def grad_norm(grads: dict[str, FloatArray], names: Sequence[str] = POLICY_PARAM_NAMES) -> float:
    return float(np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names if n in grads)))


def update_step(
    params: PolicyParams,
    grads: dict[str, FloatArray],
    state: OptimizerState,
    hyper: HyperParams,
    trainable: Sequence[str] = POLICY_PARAM_NAMES,
    learning_rate: float | None = None,
    weight_decay: float | None = None,
) -> PolicyParams:
    """目的関数を上る方向への AdamW の 1 ステップ (重み減衰は分離型)

    trainable に含まれないパラメータ (既定では回答ヘッド) は変更しない。
    state は破壊的に更新する。
    """
    for name in trainable:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(f"パラメータ {name} の勾配に非有限値が含まれています")

    lr = hyper.learning_rate if learning_rate is None else learning_rate
    wd = hyper.weight_decay if weight_decay is None else weight_decay
    beta1, beta2 = hyper.adam_beta1, hyper.adam_beta2
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    arrays = params.arrays()
    updated: dict[str, FloatArray] = dict(arrays)
    for name in trainable:
        g = grads[name]
        m = beta1 * state.first_moment.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.second_moment.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + hyper.adam_eps)
        updated[name] = arrays[name] + step - lr * wd * arrays[name]
    return params.with_arrays(updated)
