"""
方策モジュール - 小さな自己回帰トークン方策 π_θ と回答ヘッド q(·|u)

構成: 埋め込み + 位置埋め込み → 因果的注意による混合層 (残差) → tanh 前向き層 (残差)
→ 出力ヘッド / 回答ヘッド。隠れ状態は最後の残差加算の後のベクトル。
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from gc2po_lab.models import tensor as tc
from gc2po_lab.models.episode import EpisodeSpan
from gc2po_lab.models.tensor import FloatArray, Tensor
from gc2po_lab.models.vocabulary import EOS, Vocabulary

CHECKPOINT_VERSION = 1
DEFAULT_MAX_POSITIONS = 96
INIT_SCALE = 0.05
_MASK_VALUE = -1e9

PARAM_NAMES = (
    "embedding",
    "position",
    "w_query",
    "w_key",
    "w_value",
    "w_mix",
    "w_ff_in",
    "w_ff_out",
    "w_out",
    "w_answer",
    "b_answer",
)
ANSWER_HEAD_NAMES = ("w_answer", "b_answer")
POLICY_PARAM_NAMES = tuple(n for n in PARAM_NAMES if n not in ANSWER_HEAD_NAMES)


class DegenerateEpisodeError(ValueError):
    """最終トークンを持たないエピソード"""


class VocabularyMismatchError(ValueError):
    """チェックポイントと実行中の語彙が一致しない"""


class CheckpointFormatError(ValueError):
    """チェックポイントの形式が不正"""


def _expected_shapes(vocab_size: int, answer_size: int, hidden_dim: int, max_positions: int) -> dict[str, tuple[int, ...]]:
    d = hidden_dim
    return {
        "embedding": (vocab_size, d),
        "position": (max_positions, d),
        "w_query": (d, d),
        "w_key": (d, d),
        "w_value": (d, d),
        "w_mix": (d, d),
        "w_ff_in": (d, d),
        "w_ff_out": (d, d),
        "w_out": (d, vocab_size),
        "w_answer": (d, answer_size),
        "b_answer": (1, answer_size),
    }


@dataclass
class PolicyParams:
    """方策パラメータ一式 (θ, θ_old, π_ref はそれぞれ別のスナップショット)"""

    vocab: Vocabulary
    hidden_dim: int
    tensors: dict[str, Tensor]
    max_positions: int = DEFAULT_MAX_POSITIONS

    def __post_init__(self) -> None:
        if self.hidden_dim < 2:
            raise ValueError(f"隠れ次元は 2 以上が必要です: {self.hidden_dim}")
        expected = _expected_shapes(len(self.vocab), self.vocab.answer_size, self.hidden_dim, self.max_positions)
        if set(self.tensors) != set(expected):
            raise ValueError(f"パラメータ名が不正です: {sorted(self.tensors)}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"パラメータ {name} の形状が不正です: {list(t.shape)} (期待値 {list(shape)})")
            if not np.all(np.isfinite(t.values)):
                raise ValueError(f"パラメータ {name} に非有限値が含まれています")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, FloatArray]:
        return {name: t.values for name, t in self.tensors.items()}

    def with_arrays(self, arrays: dict[str, FloatArray], trainable: bool = False) -> PolicyParams:
        """値を差し替えた新しいスナップショットを作る"""
        make = tc.parameter if trainable else tc.constant
        return PolicyParams(
            vocab=self.vocab,
            hidden_dim=self.hidden_dim,
            tensors={name: make(arrays[name]) for name in PARAM_NAMES},
            max_positions=self.max_positions,
        )

    def snapshot(self, trainable: bool = False) -> PolicyParams:
        return self.with_arrays(self.arrays(), trainable=trainable)

    def gradients(self) -> dict[str, FloatArray]:
        return {name: t.grad_or_zeros() for name, t in self.tensors.items()}


@dataclass
class PolicyOutput:
    """位置ごとの次トークン対数確率と隠れ状態"""

    log_probs: Tensor
    hidden: Tensor

    def __len__(self) -> int:
        return self.hidden.shape[0]


@dataclass
class Trajectory:
    """サンプルされた候補 1 本"""

    question: tuple[str, ...]
    tokens: tuple[str, ...]
    old_logprobs: FloatArray
    truncated: bool = False
    answer: str | None = None
    r_out: int = 0
    seed: int | None = None
    extras: dict[str, Any] = field(default_factory=dict)  # type: ignore

    def __post_init__(self) -> None:
        self.old_logprobs = np.asarray(self.old_logprobs, dtype=np.float64)
        if self.old_logprobs.shape != (len(self.tokens),):
            raise ValueError(
                f"対数確率の数がトークン数と一致しません: {self.old_logprobs.shape[0]} != {len(self.tokens)}"
            )
        if np.any(self.old_logprobs > 0.0):
            raise ValueError("対数確率に正の値が含まれています")

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def full_sequence(self) -> tuple[str, ...]:
        return self.question + self.tokens


def init_policy(
    vocab: Vocabulary, hidden_dim: int = 32, seed: int = 0, max_positions: int = DEFAULT_MAX_POSITIONS
) -> PolicyParams:
    """埋め込みと混合層は一様乱数、ヘッドはゼロで初期化する (初期方策は一様)"""
    rng = np.random.default_rng(seed)
    shapes = _expected_shapes(len(vocab), vocab.answer_size, hidden_dim, max_positions)
    arrays: dict[str, FloatArray] = {}
    for name in PARAM_NAMES:
        if name in ("w_out",) + ANSWER_HEAD_NAMES:
            arrays[name] = np.zeros(shapes[name])
        else:
            arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shapes[name])
    return PolicyParams(
        vocab=vocab,
        hidden_dim=hidden_dim,
        tensors={name: tc.parameter(a) for name, a in arrays.items()},
        max_positions=max_positions,
    )


@functools.lru_cache(maxsize=256)
def _causal_mask(length: int) -> FloatArray:
    mask = np.triu(np.full((length, length), _MASK_VALUE), k=1)
    mask.setflags(write=False)
    return mask


def forward(params: PolicyParams, tokens: Sequence[str]) -> PolicyOutput:
    """トークン列全体の順伝播。位置 t の出力は t 以前のトークンのみに依存する。"""
    if len(tokens) < 1:
        raise ValueError("トークン列が空です")
    if len(tokens) > params.max_positions:
        raise ValueError(f"系列長 {len(tokens)} が最大位置数 {params.max_positions} を超えています")
    ids = params.vocab.encode(tokens)
    length = len(ids)
    scale = 1.0 / float(np.sqrt(params.hidden_dim))

    h0 = tc.take_rows(params["embedding"], ids) + tc.take_rows(params["position"], range(length))
    query = h0 @ params["w_query"]
    key = h0 @ params["w_key"]
    value = h0 @ params["w_value"]
    scores = (query @ tc.transpose(key)) * scale + tc.constant(_causal_mask(length))
    attention = tc.softmax(scores, axis=1)
    mixed = h0 + (attention @ value) @ params["w_mix"]
    hidden = mixed + tc.tanh(mixed @ params["w_ff_in"]) @ params["w_ff_out"]
    log_probs = tc.log_softmax(hidden @ params["w_out"], axis=1)
    return PolicyOutput(log_probs=log_probs, hidden=hidden)


def sequence_logprobs(params: PolicyParams, question: Sequence[str], tokens: Sequence[str]) -> Tensor:
    """生成部分の各トークンの対数確率 log π(y_t | x, y_<t) (長さ T のテンソル)"""
    out = forward(params, tuple(question) + tuple(tokens))
    offset = len(question)
    rows = [offset + t - 1 for t in range(len(tokens))]
    cols = params.vocab.encode(tokens)
    return tc.pick(out.log_probs, rows, cols)


def sample_trajectory(
    params: PolicyParams,
    question: Sequence[str],
    temperature: float = 1.0,
    max_len: int = 48,
    seed: int = 0,
) -> Trajectory:
    """終端記号か max_len まで自己回帰的にサンプリングする

    temperature == 0 は argmax (貪欲) モード。記録する対数確率は温度をかけない
    π_θ の値で、forward() による再採点と一致する。
    """
    if temperature < 0:
        raise ValueError(f"温度は 0 以上である必要があります: {temperature}")
    if max_len < 1:
        raise ValueError(f"max_len は 1 以上である必要があります: {max_len}")

    rng = np.random.default_rng(seed)
    prefix = list(question)
    generated: list[str] = []
    logprobs: list[float] = []
    for _ in range(max_len):
        row = forward(params, prefix).log_probs.values[-1]
        if temperature == 0:
            choice = int(np.argmax(row))
        else:
            scaled = row / temperature
            probs = np.exp(scaled - np.max(scaled))
            probs /= probs.sum()
            choice = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
            choice = min(choice, len(row) - 1)
        symbol = params.vocab.symbols[choice]
        generated.append(symbol)
        logprobs.append(float(row[choice]))
        prefix.append(symbol)
        if symbol == EOS:
            break

    return Trajectory(
        question=tuple(question),
        tokens=tuple(generated),
        old_logprobs=np.array(logprobs, dtype=np.float64),
        truncated=generated[-1] != EOS,
        seed=seed,
    )


def episode_representation(out: PolicyOutput, span: EpisodeSpan, offset: int = 0) -> FloatArray:
    """エピソードの最終トークン位置の隠れ状態 u を返す

    Args:
        out: 質問 + 生成列に対する順伝播結果
        span: 生成列内の位置で表したエピソード
        offset: 生成列の先頭が全体系列のどこから始まるか (質問長)
    """
    if span.length == 0:
        raise DegenerateEpisodeError(f"エピソード {span.index} は空です")
    position = offset + span.end
    if span.start < 0 or position >= len(out):
        raise DegenerateEpisodeError(f"エピソード {span.index} が系列の範囲外です: end={position}, 長さ={len(out)}")
    return out.hidden.values[position].copy()


def answer_distribution(params: PolicyParams, u: FloatArray) -> FloatArray:
    """回答ヘッドによる回答分布 q(·|u)"""
    vector = np.asarray(u, dtype=np.float64)
    if vector.shape != (params.hidden_dim,):
        raise ValueError(f"u の形状が不正です: {list(vector.shape)} (期待値 [{params.hidden_dim}])")
    if not np.all(np.isfinite(vector)):
        raise tc.DomainError("u に非有限値が含まれています")
    logits = tc.constant(vector[None, :]) @ tc.constant(params["w_answer"].values) + tc.constant(
        params["b_answer"].values
    )
    return tc.softmax(logits, axis=1).values[0].copy()


def answer_distributions(params: PolicyParams, vectors: Iterable[FloatArray]) -> list[FloatArray]:
    return [answer_distribution(params, v) for v in vectors]


def check_vocabulary(params: PolicyParams, vocab: Vocabulary) -> None:
    if params.vocab.symbols != vocab.symbols or params.vocab.answer_symbols != vocab.answer_symbols:
        raise VocabularyMismatchError("チェックポイントの語彙が現在の語彙と一致しません")


def save_checkpoint(params: PolicyParams, path: Path) -> Path:
    """語彙・形状・値を npz で保存する (ビット単位で復元可能)"""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, Any] = {
        "__format__": np.array(CHECKPOINT_VERSION),
        "__vocabulary__": np.array(params.vocab.symbols),
        "__answer_vocabulary__": np.array(params.vocab.answer_symbols),
        "__hidden_dim__": np.array(params.hidden_dim),
        "__max_positions__": np.array(params.max_positions),
    }
    payload.update(params.arrays())
    with open(path, "wb") as f:
        np.savez(f, **payload)
    return path


def load_checkpoint(path: Path, trainable: bool = False, vocab: Vocabulary | None = None) -> PolicyParams:
    """npz チェックポイントを読み込む。vocab を渡すと語彙の一致も検査する。"""
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["__format__"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointFormatError(f"未対応のチェックポイント形式です: version={version}")
            loaded_vocab = Vocabulary(
                symbols=tuple(str(s) for s in data["__vocabulary__"]),
                answer_symbols=tuple(str(s) for s in data["__answer_vocabulary__"]),
            )
            hidden_dim = int(data["__hidden_dim__"])
            max_positions = int(data["__max_positions__"])
            arrays = {name: np.array(data[name], dtype=np.float64) for name in PARAM_NAMES}
    except KeyError as err:
        raise CheckpointFormatError(f"チェックポイントに必要な項目がありません: {err}") from err

    make = tc.parameter if trainable else tc.constant
    params = PolicyParams(
        vocab=loaded_vocab,
        hidden_dim=hidden_dim,
        tensors={name: make(a) for name, a in arrays.items()},
        max_positions=max_positions,
    )
    if vocab is not None:
        check_vocabulary(params, vocab)
    return params
