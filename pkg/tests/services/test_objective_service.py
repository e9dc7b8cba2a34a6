"""
目的関数サービスのテスト
"""

import functools
from typing import Callable

import numpy as np
import pytest

from gc2po_lab.models.episode import parse_episodes
from gc2po_lab.models.policy import ANSWER_HEAD_NAMES, POLICY_PARAM_NAMES, PolicyParams, Trajectory, sequence_logprobs
from gc2po_lab.models.tensor import FloatArray
from gc2po_lab.services.credit_service import build_credit_table
from gc2po_lab.services.objective_service import (
    GroupBatch,
    NonFiniteGradientError,
    OptimizerState,
    gc2po_objective,
    grad_norm,
    grpo_objective,
    kl_estimate,
    kl_penalty,
    objective_gradients,
    prob_ratio,
    update_step,
)
from gc2po_lab.utils.config import HyperParams

TokenFactory = Callable[[np.random.Generator, int], tuple[str, ...]]

QUESTION = ("<q>", "3", "#1", "+", "4", "</q>")
TOKENS = [
    ("<e1>", "3", "+", "4", "=", "7", "</e1>", "<ans>", "7"),
    ("<e1>", "3", "*", "4", "=", "12", "</e1>", "<ans>", "12"),
    ("<e1>", "7", "</e1>", "<ans>", "7", "<eos>", "1", "2", "3"),
]


def make_trajectory(params: PolicyParams, tokens: tuple[str, ...], shift: float | np.ndarray = 0.0, r_out: int = 0) -> Trajectory:
    """現在の方策の対数確率を shift だけずらした θ_old を持つ軌跡"""
    logprobs = sequence_logprobs(params, QUESTION, tokens).values
    return Trajectory(question=QUESTION, tokens=tokens, old_logprobs=logprobs - shift, r_out=r_out)


def single_token_group(params: PolicyParams, ratio: float, advantage: float) -> GroupBatch:
    traj = make_trajectory(params, ("7",), shift=np.log(ratio))
    return GroupBatch(trajectories=[traj], token_advantages=[np.array([advantage])], ref_logprobs=[traj.old_logprobs])


class TestRatioAndKl:
    """prob_ratio / kl_penalty関数のテスト"""

    def test_identity_ratio(self, small_policy: PolicyParams):
        traj = make_trajectory(small_policy, TOKENS[0])
        assert all(prob_ratio(small_policy, traj, t) == pytest.approx(1.0, abs=1e-12) for t in range(traj.length))

    def test_ratio_of_two(self, small_policy: PolicyParams):
        traj = make_trajectory(small_policy, TOKENS[0], shift=np.log(2.0))
        assert prob_ratio(small_policy, traj, 3) == pytest.approx(2.0, rel=1e-12)

    def test_ratio_out_of_range(self, small_policy: PolicyParams):
        traj = make_trajectory(small_policy, TOKENS[0])
        with pytest.raises(IndexError, match="範囲外"):
            prob_ratio(small_policy, traj, traj.length)

    def test_kl_values(self):
        assert float(kl_estimate(0.0)) == 0.0
        assert float(kl_estimate(np.log(2.0))) == pytest.approx(2 - np.log(2.0) - 1, abs=1e-12)
        assert float(kl_estimate(np.log(2.0))) == pytest.approx(0.30685, abs=1e-5)

    def test_kl_is_nonnegative(self):
        ratios = np.random.default_rng(0).uniform(np.log(1e-3), np.log(1e3), size=100_000)
        assert np.all(kl_estimate(ratios) >= 0.0)

    def test_kl_penalty_same_policy(self, small_policy: PolicyParams):
        traj = make_trajectory(small_policy, TOKENS[1])
        assert kl_penalty(small_policy, small_policy.snapshot(), traj, 2) == pytest.approx(0.0, abs=1e-12)


class TestGc2poObjective:
    """gc2po_objective関数のテスト"""

    def test_identity_ratio_gives_mean_advantage(self, small_policy: PolicyParams):
        """θ = θ_old, β_KL = 0 なら J = (1/K)Σ_k (1/T_k)Σ_t A_{k,t}"""
        trajs = [make_trajectory(small_policy, t) for t in TOKENS]
        advantages = [np.random.default_rng(i).normal(size=t.length) for i, t in enumerate(trajs)]
        group = GroupBatch(trajectories=trajs, token_advantages=advantages, ref_logprobs=[t.old_logprobs for t in trajs])
        result = gc2po_objective(small_policy, [group], HyperParams(beta_kl=0.0))
        expected = np.mean([a.mean() for a in advantages])
        assert result.value.item() == pytest.approx(expected, abs=1e-12)
        assert result.clip_fraction_max == 0.0

    def test_positive_advantage_is_clipped(self, small_policy: PolicyParams):
        result = gc2po_objective(small_policy, [single_token_group(small_policy, 1.5, 1.0)], HyperParams(beta_kl=0.0))
        assert result.value.item() == pytest.approx(1.2, abs=1e-12)
        assert result.clip_fraction_mean == 1.0

    def test_negative_advantage_is_clipped(self, small_policy: PolicyParams):
        result = gc2po_objective(small_policy, [single_token_group(small_policy, 0.5, -1.0)], HyperParams(beta_kl=0.0))
        assert result.value.item() == pytest.approx(-0.8, abs=1e-12)

    def test_clip_inactive_inside_interval(self, small_policy: PolicyParams):
        result = gc2po_objective(small_policy, [single_token_group(small_policy, 1.1, 2.0)], HyperParams(beta_kl=0.0))
        assert result.value.item() == pytest.approx(2.2, abs=1e-12)

    def test_kl_term(self, small_policy: PolicyParams):
        """参照方策との比 r = 2 なら J = -β_KL·(2 - ln2 - 1)"""
        traj = make_trajectory(small_policy, ("7",))
        group = GroupBatch(
            trajectories=[traj], token_advantages=[np.zeros(1)], ref_logprobs=[traj.old_logprobs + np.log(2.0)]
        )
        result = gc2po_objective(small_policy, [group], HyperParams(beta_kl=0.04))
        assert result.value.item() == pytest.approx(-0.04 * (1 - np.log(2.0)), abs=1e-12)
        assert result.kl_mean == pytest.approx(1 - np.log(2.0), abs=1e-12)

    def test_empty_inputs(self, small_policy: PolicyParams):
        with pytest.raises(ValueError, match="空のバッチ"):
            gc2po_objective(small_policy, [], HyperParams())
        with pytest.raises(ValueError, match="候補が 1 つもない"):
            GroupBatch(trajectories=[], token_advantages=[], ref_logprobs=[])
        traj = make_trajectory(small_policy, ("7",))
        with pytest.raises(ValueError, match="軌跡長"):
            GroupBatch(trajectories=[traj], token_advantages=[np.zeros(2)], ref_logprobs=[traj.old_logprobs])


class TestGrpoObjective:
    """grpo_objective関数のテスト"""

    def test_identity_ratio_gives_mean_advantage(self, small_policy: PolicyParams):
        trajs = [make_trajectory(small_policy, t, r_out=r) for t, r in zip(TOKENS, (1, 0, 0))]
        result = grpo_objective(small_policy, [trajs], [[t.old_logprobs for t in trajs]], HyperParams(beta_kl=0.0))
        assert result.value.item() == pytest.approx(0.0, abs=1e-9)

    def test_all_correct_leaves_only_kl(self, small_policy: PolicyParams):
        trajs = [make_trajectory(small_policy, t, r_out=1) for t in TOKENS]
        refs = [t.old_logprobs - 0.3 for t in trajs]
        result = grpo_objective(small_policy, [trajs], [refs], HyperParams(beta_kl=0.04))
        expected = -0.04 * float(kl_estimate(-0.3))
        assert result.value.item() == pytest.approx(expected, abs=1e-12)

    def test_matches_gc2po_under_reduction(self, small_policy: PolicyParams, tagged_tokens: TokenFactory):
        """λ_cf=0・等長なら、分割結果から作った GC²PO の目的関数と勾配は GRPO と一致する (100 バッチ)"""
        rng = np.random.default_rng(30)
        for _ in range(100):
            hyper = HyperParams(
                lambda_cf=0.0,
                trim_fraction=float(rng.uniform(0.0, 0.5)),
                eps_std=0.0,
                beta_kl=float(rng.uniform(0.0, 0.1)),
            )
            groups: list[GroupBatch] = []
            batch: list[list[Trajectory]] = []
            refs: list[list[FloatArray]] = []
            for _ in range(int(rng.integers(1, 3))):
                length = int(rng.integers(6, 20))
                trajs: list[Trajectory] = []
                for _ in range(int(rng.integers(2, 5))):
                    tokens = tagged_tokens(rng, length)
                    current = sequence_logprobs(small_policy, QUESTION, tokens).values
                    old = np.minimum(current + rng.uniform(-0.3, 0.3, size=length), 0.0)
                    trajs.append(Trajectory(question=QUESTION, tokens=tokens, old_logprobs=old, r_out=int(rng.integers(0, 2))))
                segs = [parse_episodes(t.tokens) for t in trajs]
                table = build_credit_table(
                    [t.r_out for t in trajs],
                    [seg.spans for seg in segs],
                    [t.old_logprobs for t in trajs],
                    [list(rng.uniform(0.0, 2.0, size=len(seg.scored_spans))) for seg in segs],
                    hyper,
                )
                ref = [t.old_logprobs - rng.uniform(0.0, 0.2) for t in trajs]
                groups.append(GroupBatch(trajectories=trajs, token_advantages=table.token_advantages, ref_logprobs=ref))
                batch.append(trajs)
                refs.append(ref)

            gc2po, gc2po_grads = objective_gradients(small_policy, functools.partial(gc2po_objective, groups=groups, hyper=hyper))
            grpo, grpo_grads = objective_gradients(
                small_policy, functools.partial(grpo_objective, trajectories=batch, ref_logprobs=refs, hyper=hyper)
            )
            assert gc2po.value.item() == pytest.approx(grpo.value.item(), abs=1e-9)
            for name in POLICY_PARAM_NAMES:
                np.testing.assert_allclose(gc2po_grads[name], grpo_grads[name], atol=1e-9)

    def test_empty_batch(self, small_policy: PolicyParams):
        with pytest.raises(ValueError, match="空のバッチ"):
            grpo_objective(small_policy, [[]], [[]], HyperParams())


class TestGradients:
    """objective_gradients関数のテスト"""

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, small_policy: PolicyParams, tagged_tokens: TokenFactory, seed: int):
        """解析的勾配と中心差分 (h=1e-5) の一致。比はクリップ区間の内側に保つ。"""
        assert small_policy.num_parameters <= 5000
        rng = np.random.default_rng(seed)
        hyper = HyperParams(beta_kl=float(rng.uniform(0.0, 0.1)), eps_clip=0.2)
        token_sets = [tagged_tokens(rng, int(rng.integers(6, 14))) for _ in range(int(rng.integers(1, 4)))]
        trajs = [make_trajectory(small_policy, t, shift=rng.uniform(-0.05, 0.05, size=len(t)) - 0.06) for t in token_sets]
        group = GroupBatch(
            trajectories=trajs,
            token_advantages=[rng.normal(size=t.length) for t in trajs],
            ref_logprobs=[t.old_logprobs - rng.uniform(0.0, 0.3) for t in trajs],
        )

        def objective(p: PolicyParams):
            return gc2po_objective(p, [group], hyper)

        result, grads = objective_gradients(small_policy, objective)
        assert result.clip_fraction_max == 0.0

        h = 1e-5
        arrays = small_policy.arrays()
        for name in POLICY_PARAM_NAMES:
            flat_count = arrays[name].size
            for flat in rng.choice(flat_count, size=min(flat_count, 6), replace=False):
                idx = np.unravel_index(int(flat), arrays[name].shape)
                plus = {k: v.copy() for k, v in arrays.items()}
                minus = {k: v.copy() for k, v in arrays.items()}
                plus[name][idx] += h
                minus[name][idx] -= h
                numeric = (
                    objective(small_policy.with_arrays(plus)).value.item()
                    - objective(small_policy.with_arrays(minus)).value.item()
                ) / (2 * h)
                np.testing.assert_allclose(grads[name][idx], numeric, rtol=1e-4, atol=1e-8)
        for name in ANSWER_HEAD_NAMES:
            assert np.all(grads[name] == 0.0)

    def test_zero_gradient_at_saturation(self, small_policy: PolicyParams):
        """A > 0 かつ ρ > 1+ε ではクリップ側が選ばれ勾配は 0"""
        group = single_token_group(small_policy, 1.5, 1.0)
        _, grads = objective_gradients(small_policy, lambda p: gc2po_objective(p, [group], HyperParams(beta_kl=0.0)))
        assert grad_norm(grads) == 0.0

    def test_advantages_are_constants(self, small_policy: PolicyParams):
        """勾配計算は元のパラメータに勾配を残さない"""
        group = single_token_group(small_policy, 1.0, 1.0)
        objective_gradients(small_policy, lambda p: gc2po_objective(p, [group], HyperParams()))
        assert all(t.grad is None for t in small_policy.tensors.values())


class TestUpdateStep:
    """update_step関数のテスト"""

    def test_zero_gradient_is_fixed_point(self, small_policy: PolicyParams):
        grads = {name: np.zeros_like(a) for name, a in small_policy.arrays().items()}
        updated = update_step(small_policy, grads, OptimizerState(), HyperParams(weight_decay=0.0))
        for name, array in small_policy.arrays().items():
            assert np.array_equal(updated[name].values, array)

    def test_zero_learning_rate(self, small_policy: PolicyParams):
        grads = {name: np.ones_like(a) for name, a in small_policy.arrays().items()}
        updated = update_step(small_policy, grads, OptimizerState(), HyperParams(learning_rate=0.0))
        for name, array in small_policy.arrays().items():
            assert np.array_equal(updated[name].values, array)

    def test_ascent_direction_and_frozen_head(self, small_policy: PolicyParams):
        grads = {name: np.ones_like(a) for name, a in small_policy.arrays().items()}
        state = OptimizerState()
        updated = update_step(small_policy, grads, state, HyperParams(weight_decay=0.0, learning_rate=0.01))
        assert state.step == 1
        assert np.all(updated["w_mix"].values > small_policy["w_mix"].values)
        for name in ANSWER_HEAD_NAMES:
            assert np.array_equal(updated[name].values, small_policy[name].values)

    def test_non_finite_gradient(self, small_policy: PolicyParams):
        grads = {name: np.zeros_like(a) for name, a in small_policy.arrays().items()}
        grads["w_key"] = grads["w_key"].copy()
        grads["w_key"][0, 0] = np.inf
        with pytest.raises(NonFiniteGradientError, match="w_key"):
            update_step(small_policy, grads, OptimizerState(), HyperParams())

    def test_deterministic_over_ten_steps(self, small_policy: PolicyParams):
        """同じ入力からの 10 ステップはビット単位で一致する"""
        hyper = HyperParams()

        def run() -> PolicyParams:
            params = small_policy
            state = OptimizerState()
            for _ in range(10):
                trajs = [make_trajectory(params, t, shift=-0.05) for t in TOKENS[:2]]
                group = GroupBatch(
                    trajectories=trajs,
                    token_advantages=[np.linspace(-1.0, 1.0, t.length) for t in trajs],
                    ref_logprobs=[t.old_logprobs for t in trajs],
                )
                _, grads = objective_gradients(params, lambda p: gc2po_objective(p, [group], hyper))
                params = update_step(params, grads, state, hyper)
            return params

        a = run()
        b = run()
        for name in a.tensors:
            assert np.array_equal(a[name].values, b[name].values)
