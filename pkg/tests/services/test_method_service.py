"""
学習手法サービスのテスト
"""

import numpy as np
import pytest

from gc2po_lab.models.episode import parse_episodes
from gc2po_lab.models.policy import PolicyParams, Trajectory
from gc2po_lab.models.task import ArithmeticTask, Operation, build_solution
from gc2po_lab.services.credit_service import grpo_credit_table
from gc2po_lab.services.method_service import (
    GC2POMethod,
    GroupCredit,
    GRPOMethod,
    TrainingMethod,
    get_training_method,
)
from gc2po_lab.services.perturbation_service import PerturbationSpec
from gc2po_lab.services.rollout_service import GroupRollout
from gc2po_lab.utils.config import METHOD_NAMES, HyperParams

TASK = ArithmeticTask(start=3, operations=(Operation("+", 4), Operation("*", 2)))


def make_group(rng_seed: int = 0) -> GroupRollout:
    """正解・誤答・不正な列を混ぜた 4 本のグループ"""
    rng = np.random.default_rng(rng_seed)
    token_lists = [
        TASK.canonical_solution(),
        build_solution(TASK, [7, 15], 15),
        build_solution(TASK, [8, 16], 16),
        ("<e1>", "3", "+", "4", "=", "7", "</e1>", "<e2>", "7", "<ans>", "14"),
    ]
    trajectories: list[Trajectory] = []
    segmented = []
    for i, tokens in enumerate(token_lists):
        seg = parse_episodes(tokens)
        trajectory = Trajectory(
            question=TASK.question,
            tokens=tokens,
            old_logprobs=np.log(rng.uniform(0.05, 1.0, size=len(tokens))),
            answer=seg.answer,
            r_out=int(seg.valid and seg.answer == TASK.answer_symbol),
            extras={"operator_seed": 100 + i},
        )
        trajectories.append(trajectory)
        segmented.append(seg)
    return GroupRollout(task=TASK, trajectories=trajectories, segmented=segmented)


class TestTrainingMethod:
    """TrainingMethodのテスト"""

    class MockMethod(TrainingMethod):
        """テスト用のモック手法"""

        name = "mock"

        def assign_credit(self, params, group, spec, hyper) -> GroupCredit:
            """モック実装 (全候補に一定のアドバンテージ)"""
            table = grpo_credit_table([1] + [0] * (len(group.trajectories) - 1), [t.length for t in group.trajectories], hyper)
            return GroupCredit(table=table, breakdowns=[[] for _ in group.trajectories])

    def test_mock_method(self, small_policy: PolicyParams):
        """抽象基底クラスを継承した手法が使えること"""
        method = self.MockMethod()
        credit = method.assign_credit(small_policy, make_group(), PerturbationSpec(), HyperParams())
        assert not method.uses_cf_reward
        assert credit.table.group_size == 4

    def test_get_training_method(self):
        """get_training_methodメソッドのテスト"""
        for name in METHOD_NAMES:
            assert get_training_method(name).name == name
        assert isinstance(get_training_method(" GRPO "), GRPOMethod)
        assert isinstance(get_training_method("gc2po"), GC2POMethod)

    def test_get_training_method_error(self):
        """get_training_methodメソッドのテスト（例外ケース）"""
        with pytest.raises(ValueError, match="サポートされていない手法です"):
            get_training_method("ppo")

    def test_variant_flags(self):
        no_exp = get_training_method("no-s_exp")
        no_sta = get_training_method("no-s_sta")
        no_cf = get_training_method("no-r_cf")
        assert isinstance(no_exp, GC2POMethod) and not no_exp.use_expressiveness and no_exp.use_stability
        assert isinstance(no_sta, GC2POMethod) and not no_sta.use_stability and no_sta.use_expressiveness
        assert isinstance(no_cf, GC2POMethod) and not no_cf.uses_cf_reward


class TestAssignCredit:
    """assign_creditメソッドのテスト"""

    def test_grpo_uses_constant_advantages(self, small_policy: PolicyParams):
        group = make_group()
        credit = GRPOMethod().assign_credit(small_policy, group, PerturbationSpec(), HyperParams())
        assert group.r_outs == [1, 0, 0, 0]
        for advantages, trajectory in zip(credit.table.token_advantages, group.trajectories):
            assert advantages.size == trajectory.length
            assert np.ptp(advantages) == 0.0
        assert credit.breakdowns == [[], [], [], []]

    def test_gc2po_scores_valid_episodes_only(self, small_policy: PolicyParams):
        """不正な列には反実仮想報酬を与えない"""
        group = make_group()
        credit = GC2POMethod().assign_credit(small_policy, group, PerturbationSpec(), HyperParams())
        assert [len(b) for b in credit.breakdowns] == [2, 2, 2, 0]
        assert credit.breakdowns[0][0].operator_seed != credit.breakdowns[1][0].operator_seed
        assert np.all(credit.table.rewards[3] == 0.0)
        for advantages, trajectory in zip(credit.table.token_advantages, group.trajectories):
            assert advantages.size == trajectory.length

    def test_no_cf_reduces_to_outcome_split(self, small_policy: PolicyParams):
        group = make_group()
        credit = get_training_method("no-r_cf").assign_credit(small_policy, group, PerturbationSpec(), HyperParams())
        assert credit.table.episode_scores[0] == [pytest.approx(0.5), pytest.approx(0.5)]
        assert credit.table.episode_scores[1] == [0.0, 0.0]
        assert credit.breakdowns == [[], [], [], []]
        # 結果報酬は全トークンに均等なので、アドバンテージは系列内で一定
        for advantages in credit.table.token_advantages:
            assert np.ptp(advantages) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic_given_operator_seeds(self, small_policy: PolicyParams):
        a = GC2POMethod().assign_credit(small_policy, make_group(), PerturbationSpec(), HyperParams())
        b = GC2POMethod().assign_credit(small_policy, make_group(), PerturbationSpec(), HyperParams())
        assert a.table.to_record() == b.table.to_record()
