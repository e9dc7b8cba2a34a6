"""
クレジット割り当てサービスモジュール - 結果報酬と反実仮想報酬をトークン単位のアドバンテージに変換する
"""

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from gc2po_lab.models.episode import EpisodeSpan
from gc2po_lab.models.tensor import DomainError, FloatArray, ShapeError
from gc2po_lab.utils.config import HyperParams


def episodic_score(r_out: int | float, num_episodes: int, r_cf: float, lambda_cf: float) -> float:
    """S_{k,l} = R_out / L_k + λ_cf·R_cf"""
    if num_episodes < 1:
        raise ValueError(f"エピソード数 L_k は 1 以上である必要があります: {num_episodes}")
    return float(r_out) / num_episodes + lambda_cf * r_cf


def surprise_weights(old_logprobs: FloatArray, spans: Sequence[EpisodeSpan]) -> FloatArray:
    """旧方策での驚き -log π_old をエピソード内で正規化した重み

    エピソード外のトークン (タグ、回答領域) の重みは 0。驚きが全て 0 の
    エピソードは一様重みにする。
    """
    logprobs = np.asarray(old_logprobs, dtype=np.float64)
    if np.any(logprobs > 0.0):
        raise DomainError("対数確率に正の値が含まれています")
    weights = np.zeros_like(logprobs)
    for span in spans:
        if span.is_empty:
            continue
        if span.end >= logprobs.size:
            raise ShapeError(f"エピソード {span.index} が系列の範囲外です: end={span.end}, 長さ={logprobs.size}")
        surprise = -logprobs[span.start : span.end + 1]
        mass = float(surprise.sum())
        if mass > 0.0:
            weights[span.start : span.end + 1] = surprise / mass
        else:
            weights[span.start : span.end + 1] = 1.0 / span.length
    return weights


def token_rewards(scores: Sequence[float], weights: FloatArray, spans: Sequence[EpisodeSpan]) -> FloatArray:
    """r_{k,t} = S_{k,l(t)}·w_{k,t} (採点対象外のトークンは 0)"""
    scored = [s for s in spans if not s.is_empty]
    if len(scores) != len(scored):
        raise ShapeError(f"エピソード得点の数が一致しません: {len(scores)} != {len(scored)}")
    rewards = np.zeros_like(np.asarray(weights, dtype=np.float64))
    for score, span in zip(scores, scored):
        rewards[span.start : span.end + 1] = score * weights[span.start : span.end + 1]
    return rewards


def outcome_rewards(r_out: int | float, length: int) -> FloatArray:
    """結果報酬を生成した全トークン (タグと回答領域を含む) に均等に配る: R_out / T_k"""
    if length < 1:
        raise ValueError(f"軌跡長 T_k は 1 以上である必要があります: {length}")
    return np.full(length, float(r_out) / length)


def truncated_mean(values: Sequence[float] | FloatArray, trim_fraction: float) -> float:
    """両端から floor(ρ·n/2) 個ずつ取り除いた平均"""
    array = np.sort(np.asarray(values, dtype=np.float64))
    if array.size == 0:
        raise ValueError("空の列の切り詰め平均は定義されません")
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError(f"切り詰め割合は [0, 0.5) の範囲である必要があります: {trim_fraction}")
    drop = math.floor(trim_fraction * array.size / 2 + 1e-9)
    kept = array[drop : array.size - drop]
    return float(np.mean(kept))


def group_advantages(scores: Sequence[float] | FloatArray, eps_std: float) -> FloatArray:
    """Â_k = (r̃_k - r̄) / sqrt(s_r² + ε_std) (母分散)"""
    values = np.asarray(scores, dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"グループの大きさ K は 2 以上である必要があります: {values.size}")
    if np.all(values == values[0]):
        return np.zeros_like(values)
    centered = values - values.mean()
    denominator = math.sqrt(float(np.mean(centered**2)) + eps_std)
    if denominator == 0.0:
        return np.zeros_like(values)
    return centered / denominator


def token_advantages(advantage: float, rewards: FloatArray, trajectory_score: float, eps_r: float) -> FloatArray:
    """A_{k,t} = Â_k·r_{k,t}/r̃_k (|r̃_k| < ε_r なら一様に Â_k)"""
    rewards = np.asarray(rewards, dtype=np.float64)
    if abs(trajectory_score) < eps_r:
        return np.full_like(rewards, advantage)
    return advantage * rewards / trajectory_score


@dataclass
class CreditTable:
    """K 本の候補からなる 1 グループ分のクレジット割り当て結果"""

    episode_scores: list[list[float]]
    weights: list[FloatArray]
    rewards: list[FloatArray]
    trajectory_scores: FloatArray
    group_mean: float
    group_variance: float
    advantages: FloatArray
    token_advantages: list[FloatArray]

    @property
    def group_size(self) -> int:
        return int(self.advantages.size)

    def to_record(self) -> dict[str, Any]:
        return {
            "episode_scores": self.episode_scores,
            "trajectory_scores": self.trajectory_scores.tolist(),
            "group_mean": self.group_mean,
            "group_variance": self.group_variance,
            "advantages": self.advantages.tolist(),
            "token_advantages": [a.tolist() for a in self.token_advantages],
        }


def build_credit_table(
    r_outs: Sequence[int],
    spans: Sequence[Sequence[EpisodeSpan]],
    old_logprobs: Sequence[FloatArray],
    r_cfs: Sequence[Sequence[float]],
    hyper: HyperParams,
) -> CreditTable:
    """1 グループ分の S_{k,l} → w → r → r̃ → Â → A を計算する

    トークン報酬は r_{k,t} = R_out/T_k + λ_cf·R̂_cf_{l(t)}·w_{k,t}。結果報酬の分は
    全トークンに均等、反実仮想報酬の分はエピソード内の驚き重みで配る。
    Σ_t r_{k,t} = Σ_l S_{k,l} が成り立ち、λ_cf = 0 なら r_{k,t} は t によらず一定になる。

    Args:
        r_outs: 各候補の結果報酬
        spans: 各候補のエピソード範囲 (空エピソードは採点しない)
        old_logprobs: 各候補の旧方策での対数確率
        r_cfs: 各候補の空でないエピソードごとの R̂_cf (反実仮想報酬を使わないなら 0)
        hyper: ハイパーパラメータ
    """
    k = len(r_outs)
    if not (len(spans) == len(old_logprobs) == len(r_cfs) == k):
        raise ShapeError("グループ内の候補数が入力ごとに一致しません")

    episode_scores: list[list[float]] = []
    weights: list[FloatArray] = []
    rewards: list[FloatArray] = []
    trajectory_scores = np.zeros(k)
    for i in range(k):
        scored = [s for s in spans[i] if not s.is_empty]
        if len(r_cfs[i]) != len(scored):
            raise ShapeError(f"候補 {i} の R_cf の数が採点対象エピソード数と一致しません")
        scores = [episodic_score(r_outs[i], len(scored), r_cf, hyper.lambda_cf) for r_cf in r_cfs[i]]
        w = surprise_weights(old_logprobs[i], scored)
        cf_scores = [hyper.lambda_cf * r_cf for r_cf in r_cfs[i]]
        r = outcome_rewards(r_outs[i], w.size) + token_rewards(cf_scores, w, scored)
        episode_scores.append(scores)
        weights.append(w)
        rewards.append(r)
        trajectory_scores[i] = truncated_mean(r, hyper.trim_fraction)

    advantages = group_advantages(trajectory_scores, hyper.eps_std)
    return CreditTable(
        episode_scores=episode_scores,
        weights=weights,
        rewards=rewards,
        trajectory_scores=trajectory_scores,
        group_mean=float(trajectory_scores.mean()),
        group_variance=float(trajectory_scores.var()),
        advantages=advantages,
        token_advantages=[
            token_advantages(float(a), r, float(s), hyper.eps_r)
            for a, r, s in zip(advantages, rewards, trajectory_scores)
        ],
    )


def grpo_credit_table(r_outs: Sequence[int], lengths: Sequence[int], hyper: HyperParams) -> CreditTable:
    """結果報酬だけを使うグループ相対アドバンテージ (全トークンに一定値)"""
    scores = np.asarray(r_outs, dtype=np.float64)
    advantages = group_advantages(scores, hyper.eps_std)
    return CreditTable(
        episode_scores=[[] for _ in lengths],
        weights=[np.zeros(n) for n in lengths],
        rewards=[np.zeros(n) for n in lengths],
        trajectory_scores=scores,
        group_mean=float(scores.mean()),
        group_variance=float(scores.var()),
        advantages=advantages,
        token_advantages=[np.full(n, float(a)) for a, n in zip(advantages, lengths)],
    )
