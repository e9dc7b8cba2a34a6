"""
方策のテスト
"""

from pathlib import Path

import numpy as np
import pytest

from gc2po_lab.models.episode import EpisodeSpan
from gc2po_lab.models.policy import (
    ANSWER_HEAD_NAMES,
    CheckpointFormatError,
    DegenerateEpisodeError,
    PolicyParams,
    Trajectory,
    VocabularyMismatchError,
    answer_distribution,
    episode_representation,
    forward,
    init_policy,
    load_checkpoint,
    sample_trajectory,
    save_checkpoint,
    sequence_logprobs,
)
from gc2po_lab.models.tensor import DomainError
from gc2po_lab.models.vocabulary import UnknownSymbolError, Vocabulary, build_vocabulary

QUESTION = ("<q>", "3", "#1", "+", "4", "</q>")


class TestForward:
    """forward関数のテスト"""

    def test_zero_head_gives_uniform_rows(self, vocab: Vocabulary):
        """出力ヘッドがゼロなら各行は -ln|V|"""
        params = init_policy(vocab, hidden_dim=8, seed=0)
        out = forward(params, QUESTION)
        np.testing.assert_allclose(out.log_probs.values, -np.log(len(vocab)), atol=1e-12)
        assert len(out) == len(QUESTION)

    def test_rows_are_normalized(self, small_policy: PolicyParams):
        out = forward(small_policy, QUESTION + ("<e1>", "3", "+", "4"))
        np.testing.assert_allclose(np.exp(out.log_probs.values).sum(axis=1), 1.0, atol=1e-9)

    def test_causality(self, small_policy: PolicyParams):
        """接尾辞を入れ替えても手前の位置の出力は変わらない"""
        a = forward(small_policy, QUESTION + ("<e1>", "3", "+", "4"))
        b = forward(small_policy, QUESTION + ("<e1>", "9", "*", "1"))
        prefix = forward(small_policy, QUESTION + ("<e1>",))
        n = len(QUESTION) + 1
        np.testing.assert_allclose(a.log_probs.values[:n], b.log_probs.values[:n], atol=1e-12)
        np.testing.assert_allclose(a.hidden.values[:n], prefix.hidden.values, atol=1e-12)

    def test_deterministic(self, small_policy: PolicyParams):
        a = forward(small_policy, QUESTION)
        b = forward(small_policy, QUESTION)
        assert np.array_equal(a.log_probs.values, b.log_probs.values)
        assert np.array_equal(a.hidden.values, b.hidden.values)

    def test_unknown_symbol(self, small_policy: PolicyParams):
        with pytest.raises(UnknownSymbolError, match="<bogus>"):
            forward(small_policy, ("<q>", "<bogus>"))

    def test_empty_and_too_long(self, small_policy: PolicyParams):
        with pytest.raises(ValueError, match="空"):
            forward(small_policy, ())
        with pytest.raises(ValueError, match="最大位置数"):
            forward(small_policy, ("1",) * (small_policy.max_positions + 1))


class TestPolicyParams:
    """PolicyParamsのテスト"""

    def test_invalid_hidden_dim(self, vocab: Vocabulary):
        with pytest.raises(ValueError, match="隠れ次元"):
            init_policy(vocab, hidden_dim=1)

    def test_non_finite_values_rejected(self, small_policy: PolicyParams):
        arrays = dict(small_policy.arrays())
        bad = arrays["w_mix"].copy()
        bad[0, 0] = np.nan
        arrays["w_mix"] = bad
        with pytest.raises(ValueError, match="非有限値"):
            small_policy.with_arrays(arrays)

    def test_snapshots_are_independent(self, small_policy: PolicyParams):
        trainable = small_policy.snapshot(trainable=True)
        frozen = small_policy.snapshot()
        assert all(t.requires_grad for t in trainable.tensors.values())
        assert not any(t.requires_grad for t in frozen.tensors.values())
        for name in small_policy.tensors:
            assert np.array_equal(trainable[name].values, frozen[name].values)

    def test_small_policy_is_small(self, small_policy: PolicyParams):
        """数値微分で検査できる大きさ"""
        assert small_policy.num_parameters < 5000


class TestSampleTrajectory:
    """sample_trajectory関数のテスト"""

    def test_same_seed_same_trajectory(self, small_policy: PolicyParams):
        a = sample_trajectory(small_policy, QUESTION, temperature=1.0, max_len=12, seed=5)
        b = sample_trajectory(small_policy, QUESTION, temperature=1.0, max_len=12, seed=5)
        assert a.tokens == b.tokens
        assert np.array_equal(a.old_logprobs, b.old_logprobs)

    def test_greedy_ignores_seed(self, small_policy: PolicyParams):
        """argmax モードはシードによらない"""
        a = sample_trajectory(small_policy, QUESTION, temperature=0.0, max_len=12, seed=1)
        b = sample_trajectory(small_policy, QUESTION, temperature=0.0, max_len=12, seed=2)
        assert a.tokens == b.tokens

    def test_recorded_logprobs_match_rescoring(self, small_policy: PolicyParams):
        """記録された対数確率は forward による再採点と一致する"""
        traj = sample_trajectory(small_policy, QUESTION, temperature=1.0, max_len=15, seed=7)
        rescored = sequence_logprobs(small_policy, traj.question, traj.tokens).values
        np.testing.assert_allclose(traj.old_logprobs, rescored, atol=1e-12)
        assert np.all(traj.old_logprobs <= 0.0)

    def test_truncation_is_flagged(self, vocab: Vocabulary):
        """一様方策で 1 トークンだけなら終端記号でない限り打ち切り"""
        params = init_policy(vocab, hidden_dim=4, seed=0)
        traj = sample_trajectory(params, QUESTION, temperature=1.0, max_len=1, seed=0)
        assert traj.length == 1
        assert traj.truncated == (traj.tokens[-1] != "<eos>")

    def test_invalid_arguments(self, small_policy: PolicyParams):
        with pytest.raises(ValueError, match="温度"):
            sample_trajectory(small_policy, QUESTION, temperature=-1.0)
        with pytest.raises(ValueError, match="max_len"):
            sample_trajectory(small_policy, QUESTION, max_len=0)

    def test_trajectory_validation(self):
        with pytest.raises(ValueError, match="一致しません"):
            Trajectory(question=QUESTION, tokens=("1", "2"), old_logprobs=np.array([-0.1]))
        with pytest.raises(ValueError, match="正の値"):
            Trajectory(question=QUESTION, tokens=("1",), old_logprobs=np.array([0.1]))


class TestEpisodeRepresentation:
    """episode_representation関数のテスト"""

    def test_single_token_episode(self, small_policy: PolicyParams):
        tokens = ("<e1>", "7", "</e1>")
        out = forward(small_policy, QUESTION + tokens)
        u = episode_representation(out, EpisodeSpan(index=1, start=1, end=1), offset=len(QUESTION))
        np.testing.assert_array_equal(u, out.hidden.values[len(QUESTION) + 1])

    def test_invariant_to_later_tokens(self, small_policy: PolicyParams):
        span = EpisodeSpan(index=1, start=1, end=4)
        a = forward(small_policy, QUESTION + ("<e1>", "3", "+", "4", "=", "7"))
        b = forward(small_policy, QUESTION + ("<e1>", "3", "+", "4", "*", "2"))
        np.testing.assert_allclose(
            episode_representation(a, span, len(QUESTION)), episode_representation(b, span, len(QUESTION)), atol=1e-12
        )

    def test_same_end_same_vector(self, small_policy: PolicyParams):
        out = forward(small_policy, QUESTION + ("<e1>", "3", "+", "4"))
        u1 = episode_representation(out, EpisodeSpan(index=1, start=1, end=3), len(QUESTION))
        u2 = episode_representation(out, EpisodeSpan(index=2, start=3, end=3), len(QUESTION))
        assert np.array_equal(u1, u2)

    def test_empty_or_out_of_range_span(self, small_policy: PolicyParams):
        out = forward(small_policy, QUESTION + ("<e1>", "</e1>"))
        with pytest.raises(DegenerateEpisodeError, match="空"):
            episode_representation(out, EpisodeSpan(index=1, start=1, end=0), len(QUESTION))
        with pytest.raises(DegenerateEpisodeError, match="範囲外"):
            episode_representation(out, EpisodeSpan(index=1, start=1, end=5), len(QUESTION))


class TestAnswerDistribution:
    """answer_distribution関数のテスト"""

    def test_zero_u_with_zero_head_is_uniform(self, vocab: Vocabulary):
        params = init_policy(vocab, hidden_dim=4, seed=0)
        q = answer_distribution(params, np.zeros(4))
        np.testing.assert_allclose(q, np.full(vocab.answer_size, 1.0 / vocab.answer_size))

    def test_normalized_for_random_u(self, small_policy: PolicyParams):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            q = answer_distribution(small_policy, rng.normal(0.0, 3.0, size=small_policy.hidden_dim))
            assert np.all(q >= 0.0)
            assert q.sum() == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance(self, small_policy: PolicyParams):
        """回答ロジットへの定数加算で分布は変わらない"""
        u = np.random.default_rng(1).normal(size=small_policy.hidden_dim)
        arrays = dict(small_policy.arrays())
        arrays["b_answer"] = arrays["b_answer"] + 5.0
        shifted = small_policy.with_arrays(arrays)
        np.testing.assert_allclose(answer_distribution(small_policy, u), answer_distribution(shifted, u), atol=1e-12)

    def test_invalid_u(self, small_policy: PolicyParams):
        with pytest.raises(DomainError, match="非有限値"):
            answer_distribution(small_policy, np.full(small_policy.hidden_dim, np.inf))
        with pytest.raises(ValueError, match="形状"):
            answer_distribution(small_policy, np.zeros(small_policy.hidden_dim + 1))


class TestCheckpoint:
    """チェックポイントの保存と読み込みのテスト"""

    def test_round_trip_is_bit_exact(self, small_policy: PolicyParams, tmp_path: Path):
        path = save_checkpoint(small_policy, tmp_path / "ckpt.npz")
        loaded = load_checkpoint(path, vocab=build_vocabulary())
        assert loaded.hidden_dim == small_policy.hidden_dim
        assert loaded.max_positions == small_policy.max_positions
        for name, array in small_policy.arrays().items():
            assert np.array_equal(loaded[name].values, array)
        assert not loaded[ANSWER_HEAD_NAMES[0]].requires_grad

    def test_vocabulary_mismatch(self, small_policy: PolicyParams, tmp_path: Path):
        path = save_checkpoint(small_policy, tmp_path / "ckpt.npz")
        with pytest.raises(VocabularyMismatchError):
            load_checkpoint(path, vocab=build_vocabulary(max_episodes=4))

    def test_missing_entries(self, tmp_path: Path):
        path = tmp_path / "broken.npz"
        with open(path, "wb") as f:
            np.savez(f, __format__=np.array(1))
        with pytest.raises(CheckpointFormatError, match="必要な項目"):
            load_checkpoint(path)
