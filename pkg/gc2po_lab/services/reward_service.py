"""
報酬サービスモジュール - エピソード単位の反実仮想報酬 (安定性項 S_sta と表現力項 S_exp)
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from gc2po_lab.models.episode import EpisodeSpan, SegmentedTrajectory
from gc2po_lab.models.policy import (
    DegenerateEpisodeError,
    PolicyOutput,
    PolicyParams,
    answer_distribution,
    episode_representation,
    forward,
)
from gc2po_lab.models.tensor import DomainError, FloatArray, ShapeError
from gc2po_lab.services.perturbation_service import PerturbationSpec, apply, sample_operators
from gc2po_lab.utils.config import HyperParams

logger = logging.getLogger(__name__)

# Ŝ_sta の各項の下限 (exp のアンダーフロー対策)
_MIN_STABILITY = float(np.finfo(np.float64).tiny)


def stability_score(q_base: FloatArray, q_perturbed: Sequence[FloatArray], tau: float) -> float:
    """Ŝ_sta = (1/M) Σ_m exp(-‖q - q^(m)‖² / τ)

    各項は最小の正の倍精度数で下から抑えるので、値は常に (0, 1] に入る。
    """
    if tau <= 0:
        raise DomainError(f"τ は正である必要があります: {tau}")
    if not q_perturbed:
        raise ShapeError("摂動後の分布が 1 つもありません")
    base = np.asarray(q_base, dtype=np.float64)
    total = 0.0
    for q in q_perturbed:
        other = np.asarray(q, dtype=np.float64)
        if other.shape != base.shape:
            raise ShapeError(f"分布の台の大きさが一致しません: {list(base.shape)} と {list(other.shape)}")
        total += max(float(np.exp(-float(np.sum((base - other) ** 2)) / tau)), _MIN_STABILITY)
    return total / len(q_perturbed)


def expressiveness_score(u: FloatArray, u_tilde: Sequence[FloatArray], eps_u: float) -> float:
    """Ŝ_exp = (1/M) Σ_m ‖ũ^(m)‖² / (‖u‖² + ε_u)"""
    if eps_u <= 0:
        raise DomainError(f"ε_u は正である必要があります: {eps_u}")
    if not u_tilde:
        raise ShapeError("摂動後の表現が 1 つもありません")
    base = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise DomainError("u に非有限値が含まれています")
    denominator = float(base @ base) + eps_u
    total = 0.0
    for v in u_tilde:
        other = np.asarray(v, dtype=np.float64)
        if other.shape != base.shape:
            raise ShapeError(f"表現の次元が一致しません: {list(base.shape)} と {list(other.shape)}")
        total += float(other @ other) / denominator
    return total / len(u_tilde)


@dataclass
class CfRewardBreakdown:
    """1 エピソードの反実仮想報酬の内訳"""

    episode_index: int
    distances: list[float]
    norm_ratios: list[float]
    s_sta: float
    s_exp: float
    r_cf: float
    operator_seed: int
    operators: list[dict[str, Any]] = field(default_factory=list)  # type: ignore

    @property
    def num_perturbations(self) -> int:
        return len(self.distances)

    def to_record(self) -> dict[str, Any]:
        return {
            "episode": self.episode_index,
            "s_sta": self.s_sta,
            "s_exp": self.s_exp,
            "r_cf": self.r_cf,
            "m": self.num_perturbations,
            "operator_seed": self.operator_seed,
            "distances": self.distances,
            "norm_ratios": self.norm_ratios,
        }


def operator_rng(spec: PerturbationSpec, operator_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, operator_seed]))


def cf_reward_from_representation(
    u: FloatArray,
    params: PolicyParams,
    spec: PerturbationSpec,
    hyper: HyperParams,
    operator_seed: int,
    episode_index: int = 0,
    use_stability: bool = True,
    use_expressiveness: bool = True,
) -> CfRewardBreakdown:
    """表現 u から R̂_cf を推定する

    use_stability / use_expressiveness は項を外す比較実験用。両方有効なら
    R̂_cf = Ŝ_sta + λ_exp·Ŝ_exp。
    """
    operators = sample_operators(spec, operator_rng(spec, operator_seed))
    q_base = answer_distribution(params, u)
    u_tilde = [apply(op, u) for op in operators]
    q_perturbed = [answer_distribution(params, v) for v in u_tilde]

    s_sta = stability_score(q_base, q_perturbed, hyper.tau)
    s_exp = expressiveness_score(u, u_tilde, hyper.eps_u)
    r_cf = (s_sta if use_stability else 0.0) + (hyper.lambda_exp * s_exp if use_expressiveness else 0.0)

    denominator = float(u @ u) + hyper.eps_u
    return CfRewardBreakdown(
        episode_index=episode_index,
        distances=[float(np.sum((q_base - q) ** 2)) for q in q_perturbed],
        norm_ratios=[float(v @ v) / denominator for v in u_tilde],
        s_sta=s_sta,
        s_exp=s_exp,
        r_cf=r_cf,
        operator_seed=operator_seed,
        operators=[op.to_record() for op in operators],
    )


def cf_reward(
    out: PolicyOutput,
    span: EpisodeSpan,
    params: PolicyParams,
    spec: PerturbationSpec,
    hyper: HyperParams,
    operator_seed: int,
    offset: int = 0,
    use_stability: bool = True,
    use_expressiveness: bool = True,
) -> CfRewardBreakdown:
    """エピソードの反実仮想報酬。パラメータの勾配には一切触れない。"""
    if span.is_empty:
        raise DegenerateEpisodeError(f"エピソード {span.index} は空のため報酬を計算できません")
    u = episode_representation(out, span, offset)
    return cf_reward_from_representation(
        u,
        params,
        spec,
        hyper,
        operator_seed,
        episode_index=span.index,
        use_stability=use_stability,
        use_expressiveness=use_expressiveness,
    )


def episode_operator_seeds(base_seed: int, count: int) -> list[int]:
    """軌跡ごとのシードから各エピソードの作用素シードを導く"""
    if count == 0:
        return []
    state = np.random.SeedSequence(base_seed).generate_state(count, dtype=np.uint32)
    return [int(s) for s in state]


def trajectory_cf_rewards(
    params: PolicyParams,
    question: Sequence[str],
    seg: SegmentedTrajectory,
    spec: PerturbationSpec,
    hyper: HyperParams,
    base_seed: int,
    use_stability: bool = True,
    use_expressiveness: bool = True,
) -> list[CfRewardBreakdown]:
    """空でない全エピソードの内訳 (順伝播は 1 回)"""
    spans = seg.scored_spans
    if not spans:
        return []
    out = forward(params, tuple(question) + seg.tokens)
    seeds = episode_operator_seeds(base_seed, len(spans))
    return [
        cf_reward(
            out,
            span,
            params,
            spec,
            hyper,
            seed,
            offset=len(question),
            use_stability=use_stability,
            use_expressiveness=use_expressiveness,
        )
        for span, seed in zip(spans, seeds)
    ]
