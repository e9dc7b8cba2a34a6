"""pytest構成ファイル"""

from typing import Any, Callable

import numpy as np
import pytest

from gc2po_lab.models.policy import PolicyParams, init_policy
from gc2po_lab.models.vocabulary import ANSWER_TAG, EOS, MAX_EPISODES, Vocabulary, build_vocabulary, episode_close, episode_open
from gc2po_lab.utils.config import HyperParams, RunConfig, TaskConfig, WarmupConfig


# 非同期テスト用のマーカーを登録
def pytest_configure(config: Any) -> None:
    """pytestの設定を行う"""
    config.addinivalue_line("markers", "asyncio: mark test as an asyncio test")
    config.addinivalue_line("markers", "slow: 学習ループを実際に回す時間のかかるテスト")


@pytest.fixture
def vocab() -> Vocabulary:
    return build_vocabulary()


@pytest.fixture
def small_policy(vocab: Vocabulary) -> PolicyParams:
    """勾配検査にも使える小さな方策 (5k パラメータ未満)"""
    params = init_policy(vocab, hidden_dim=4, seed=3, max_positions=64)
    # ヘッドがゼロのままだと一様分布になるので、少しだけ値を入れる
    rng = np.random.default_rng(11)
    arrays = params.arrays()
    arrays = {name: a + rng.normal(0.0, 0.1, size=a.shape) for name, a in arrays.items()}
    return params.with_arrays(arrays)


@pytest.fixture
def hyper() -> HyperParams:
    return HyperParams(group_size=4, batch_size=2, max_len=40, hidden_dim=8)


@pytest.fixture
def tiny_config(tmp_path: Any) -> RunConfig:
    """数秒で終わる学習設定"""
    config = RunConfig(
        method="gc2po",
        iterations=2,
        seeds=(0,),
        output_dir=str(tmp_path / "run"),
        checkpoint_every=1,
        eval_every=1,
        rollout_workers=2,
        hyper=HyperParams(group_size=2, num_perturbations=2, batch_size=2, max_len=24, hidden_dim=8),
        task=TaskConfig(train_questions=4, eval_questions=2, chain_lengths=(1, 2)),
        warmup=WarmupConfig(steps=2, batch_size=2),
    )
    config.perturbation.count = 2
    config.validate()
    return config


TokenFactory = Callable[[np.random.Generator, int], tuple[str, ...]]


@pytest.fixture
def tagged_tokens() -> TokenFactory:
    """長さちょうど length のランダムな生成列を作る関数

    大半は <e1> … </eE> <ans> v <eos> の整形式 (空エピソードも含む)、
    残りはタグのない不正な列。length は 6 以上。
    """

    def make(rng: np.random.Generator, length: int) -> tuple[str, ...]:
        if rng.random() < 0.15:
            return tuple(str(int(n)) for n in rng.integers(0, 100, size=length))
        budget = length - 3
        episodes = int(rng.integers(1, min(MAX_EPISODES, budget // 2) + 1))
        sizes = rng.multinomial(budget - 2 * episodes, np.ones(episodes) / episodes)
        tokens: list[str] = []
        for index, size in enumerate(sizes, start=1):
            tokens.append(episode_open(index))
            tokens.extend(str(int(n)) for n in rng.integers(0, 100, size=int(size)))
            tokens.append(episode_close(index))
        tokens.extend([ANSWER_TAG, str(int(rng.integers(100))), EOS])
        return tuple(tokens)

    return make
