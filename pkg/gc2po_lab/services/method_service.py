"""
学習手法サービスモジュール - GRPO / GC²PO / 比較用の変種の抽象化と実装
"""

import abc
from dataclasses import dataclass, field

from gc2po_lab.models.policy import PolicyParams
from gc2po_lab.services.credit_service import CreditTable, build_credit_table, grpo_credit_table
from gc2po_lab.services.perturbation_service import PerturbationSpec
from gc2po_lab.services.reward_service import CfRewardBreakdown, trajectory_cf_rewards
from gc2po_lab.services.rollout_service import GroupRollout
from gc2po_lab.utils.config import (
    METHOD_GC2PO,
    METHOD_GRPO,
    METHOD_NO_R_CF,
    METHOD_NO_S_EXP,
    METHOD_NO_S_STA,
    HyperParams,
)


@dataclass
class GroupCredit:
    """1 グループ分のクレジット表と、各候補のエピソード報酬の内訳"""

    table: CreditTable
    breakdowns: list[list[CfRewardBreakdown]] = field(default_factory=list)  # type: ignore


class TrainingMethod(abc.ABC):
    """学習手法の抽象基底クラス"""

    name: str = ""

    @abc.abstractmethod
    def assign_credit(
        self, params: PolicyParams, group: GroupRollout, spec: PerturbationSpec, hyper: HyperParams
    ) -> GroupCredit:
        """θ_old でのロールアウトからトークン単位のアドバンテージを作る"""
        pass

    @property
    def uses_cf_reward(self) -> bool:
        return False


class GRPOMethod(TrainingMethod):
    """結果報酬のみのグループ相対アドバンテージ"""

    name = METHOD_GRPO

    def assign_credit(
        self, params: PolicyParams, group: GroupRollout, spec: PerturbationSpec, hyper: HyperParams
    ) -> GroupCredit:
        table = grpo_credit_table(group.r_outs, [t.length for t in group.trajectories], hyper)
        return GroupCredit(table=table, breakdowns=[[] for _ in group.trajectories])


class GC2POMethod(TrainingMethod):
    """エピソード単位の反実仮想報酬を使う手法 (use_* で項を外した変種も表す)"""

    def __init__(
        self,
        name: str = METHOD_GC2PO,
        use_cf: bool = True,
        use_stability: bool = True,
        use_expressiveness: bool = True,
    ) -> None:
        """
        Args:
            name: 手法名 (ログと集計表に出る)
            use_cf: False なら R_cf を計算せず、結果報酬の均等配分だけを使う
            use_stability: 安定性項 S_sta を含めるか
            use_expressiveness: 表現力項 S_exp を含めるか
        """
        self.name = name
        self.use_cf = use_cf
        self.use_stability = use_stability
        self.use_expressiveness = use_expressiveness

    @property
    def uses_cf_reward(self) -> bool:
        return self.use_cf

    def assign_credit(
        self, params: PolicyParams, group: GroupRollout, spec: PerturbationSpec, hyper: HyperParams
    ) -> GroupCredit:
        breakdowns: list[list[CfRewardBreakdown]] = []
        r_cfs: list[list[float]] = []
        for trajectory, seg in zip(group.trajectories, group.segmented):
            # 不正な列には反実仮想報酬を与えない
            if self.use_cf and seg.valid:
                items = trajectory_cf_rewards(
                    params,
                    trajectory.question,
                    seg,
                    spec,
                    hyper,
                    int(trajectory.extras.get("operator_seed", 0)),
                    use_stability=self.use_stability,
                    use_expressiveness=self.use_expressiveness,
                )
                breakdowns.append(items)
                r_cfs.append([b.r_cf for b in items])
            else:
                breakdowns.append([])
                r_cfs.append([0.0] * len(seg.scored_spans))

        table = build_credit_table(
            group.r_outs,
            [seg.spans for seg in group.segmented],
            [t.old_logprobs for t in group.trajectories],
            r_cfs,
            hyper,
        )
        return GroupCredit(table=table, breakdowns=breakdowns)


def get_training_method(selector: str) -> TrainingMethod:
    """手法名から学習手法のインスタンスを取得する

    Args:
        selector: "grpo", "gc2po", "no-s_exp", "no-s_sta", "no-r_cf" のいずれか
                  (大文字小文字は区別しない)

    Returns:
        TrainingMethod: 対応する学習手法
    """
    name = selector.strip().lower()
    if name == METHOD_GRPO:
        return GRPOMethod()
    elif name == METHOD_GC2PO:
        return GC2POMethod()
    elif name == METHOD_NO_S_EXP:
        return GC2POMethod(name=METHOD_NO_S_EXP, use_expressiveness=False)
    elif name == METHOD_NO_S_STA:
        return GC2POMethod(name=METHOD_NO_S_STA, use_stability=False)
    elif name == METHOD_NO_R_CF:
        return GC2POMethod(name=METHOD_NO_R_CF, use_cf=False)
    else:
        raise ValueError(f"サポートされていない手法です: {selector}")
