"""
語彙モジュール - 数字・演算子・エピソードタグ・回答タグを原子記号として持つ
"""

from dataclasses import dataclass, field
from typing import Iterable, Sequence

QUESTION_OPEN = "<q>"
QUESTION_CLOSE = "</q>"
ANSWER_TAG = "<ans>"
EOS = "<eos>"
EQUALS = "="
OPERATORS = ("+", "-", "*")
MAX_EPISODES = 8
MAX_ANSWER = 99


class UnknownSymbolError(KeyError):
    """語彙に存在しない記号"""

    def __init__(self, symbol: str) -> None:
        super().__init__(symbol)
        self.symbol = symbol

    def __str__(self) -> str:
        return f"語彙に存在しない記号です: {self.symbol!r}"


def episode_open(index: int) -> str:
    return f"<e{index}>"


def episode_close(index: int) -> str:
    return f"</e{index}>"


def step_marker(index: int) -> str:
    return f"#{index}"


@dataclass(frozen=True)
class Vocabulary:
    """順序付き記号列と回答語彙 A"""

    symbols: tuple[str, ...]
    answer_symbols: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _answer_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("語彙に重複した記号があります")
        if not self.answer_symbols:
            raise ValueError("回答語彙が空です")
        index = {s: i for i, s in enumerate(self.symbols)}
        missing = [s for s in self.answer_symbols if s not in index]
        if missing:
            raise ValueError(f"回答語彙が語彙に含まれていません: {missing}")
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_answer_index", {s: i for i, s in enumerate(self.answer_symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: object) -> bool:
        return symbol in self._index

    @property
    def answer_size(self) -> int:
        return len(self.answer_symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError as err:
            raise UnknownSymbolError(symbol) from err

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def answer_index(self, symbol: str) -> int:
        """回答語彙内での位置"""
        try:
            return self._answer_index[symbol]
        except KeyError as err:
            raise UnknownSymbolError(symbol) from err

    def is_answer(self, symbol: str) -> bool:
        return symbol in self._answer_index


def build_vocabulary(max_episodes: int = MAX_EPISODES) -> Vocabulary:
    """算術チェーン課題用の既定語彙を組み立てる"""
    numbers = tuple(str(n) for n in range(MAX_ANSWER + 1))
    markers = tuple(step_marker(i) for i in range(1, max_episodes + 1))
    opens = tuple(episode_open(i) for i in range(1, max_episodes + 1))
    closes = tuple(episode_close(i) for i in range(1, max_episodes + 1))
    symbols = (
        numbers + OPERATORS + (EQUALS, QUESTION_OPEN, QUESTION_CLOSE) + markers + opens + closes + (ANSWER_TAG, EOS)
    )
    return Vocabulary(symbols=symbols, answer_symbols=numbers)
