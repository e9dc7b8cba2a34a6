"""
エピソード分割モジュール - <eN> … </eN> タグと <ans> タグによる生成列の解析
"""

import re
import sys
from dataclasses import dataclass, field
from typing import Any, Final, Sequence

from gc2po_lab.models.vocabulary import ANSWER_TAG, EOS, MAX_ANSWER, episode_close, episode_open

# 回答領域 (どのエピソード番号よりも後ろ) を表す番兵
ANSWER_REGION: Final[int] = sys.maxsize

_OPEN_RE = re.compile(r"^<e(\d+)>$")
_CLOSE_RE = re.compile(r"^</e(\d+)>$")
_ANSWER_SYMBOLS = frozenset(str(n) for n in range(MAX_ANSWER + 1))


def _open_index(token: str) -> int | None:
    m = _OPEN_RE.match(token)
    return int(m.group(1)) if m else None


def _close_index(token: str) -> int | None:
    m = _CLOSE_RE.match(token)
    return int(m.group(1)) if m else None


def is_tag(token: str) -> bool:
    return _open_index(token) is not None or _close_index(token) is not None or token in (ANSWER_TAG, EOS)


@dataclass(frozen=True)
class EpisodeSpan:
    """エピソード l の内容トークン範囲 (両端含む、タグは含まない)

    空エピソードは end = start - 1 で表す。
    """

    index: int
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.end < self.start - 1:
            raise ValueError(f"エピソード範囲が不正です: start={self.start}, end={self.end}")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    @property
    def is_empty(self) -> bool:
        return self.length == 0

    def positions(self) -> range:
        return range(self.start, self.end + 1)


@dataclass
class SegmentedTrajectory:
    """エピソード列と回答に分割された生成列"""

    tokens: tuple[str, ...]
    spans: list[EpisodeSpan] = field(default_factory=list)  # type: ignore
    answer_position: int | None = None
    terminated: bool = False
    valid: bool = False
    diagnostic: str | None = None

    @property
    def num_episodes(self) -> int:
        return len(self.spans)

    @property
    def scored_spans(self) -> list[EpisodeSpan]:
        """報酬計算の対象 (空でない) エピソード"""
        return [s for s in self.spans if not s.is_empty]

    @property
    def answer(self) -> str | None:
        if self.answer_position is None:
            return None
        return self.tokens[self.answer_position]

    def episode_tokens(self, span: EpisodeSpan) -> tuple[str, ...]:
        return self.tokens[span.start : span.end + 1]

    def to_record(self) -> dict[str, Any]:
        """JSONL ログ用の正準形"""
        return {
            "tokens": list(self.tokens),
            "spans": [[s.index, s.start, s.end] for s in self.spans],
            "answer": self.answer,
            "valid": self.valid,
            "diagnostic": self.diagnostic,
        }


def parse_episodes(tokens: Sequence[str]) -> SegmentedTrajectory:
    """タグ規約に従って生成列をエピソードと回答に分割する

    不正な列でも例外は投げず、整形式の最長接頭辞を解析した結果を
    valid=False と最初の違反の説明付きで返す。
    """
    seq = tuple(tokens)
    n = len(seq)
    spans: list[EpisodeSpan] = []
    pos = 0
    expected = 1
    diagnostic: str | None = None

    while pos < n and _open_index(seq[pos]) is not None:
        index = _open_index(seq[pos])
        if index != expected:
            diagnostic = f"index gap: expected episode {expected}, found episode {index}"
            break
        j = pos + 1
        while j < n and not is_tag(seq[j]):
            j += 1
        if j >= n or seq[j] in (ANSWER_TAG, EOS):
            diagnostic = f"unclosed episode {index}"
            break
        nested = _open_index(seq[j])
        if nested is not None:
            diagnostic = f"nesting: episode {nested} opened inside episode {index}"
            break
        if seq[j] != episode_close(index):
            diagnostic = f"mismatched close tag {seq[j]} for episode {index}"
            break
        spans.append(EpisodeSpan(index=index, start=pos + 1, end=j - 1))
        pos = j + 1
        expected += 1

    answer_position: int | None = None
    terminated = False
    if diagnostic is None:
        if not spans:
            diagnostic = "no episodes"
        elif pos >= n:
            diagnostic = "missing answer tag"
        elif seq[pos] != ANSWER_TAG:
            diagnostic = f"unexpected token {seq[pos]} after episode {expected - 1}"
        elif pos + 1 >= n:
            diagnostic = "missing answer"
        elif seq[pos + 1] not in _ANSWER_SYMBOLS:
            diagnostic = f"answer {seq[pos + 1]} is not in the answer vocabulary"
        else:
            answer_position = pos + 1
            rest = pos + 2
            if rest < n and seq[rest] == EOS:
                terminated = True
                rest += 1
            if rest < n:
                diagnostic = f"trailing tokens after answer at position {rest}"

    return SegmentedTrajectory(
        tokens=seq,
        spans=spans,
        answer_position=answer_position,
        terminated=terminated,
        valid=diagnostic is None,
        diagnostic=diagnostic,
    )


def render(seg: SegmentedTrajectory) -> tuple[str, ...]:
    """parse_episodes の逆変換 (有効な分割結果のみ)"""
    if not seg.valid or seg.answer is None:
        raise ValueError(f"不正な分割結果は描画できません: {seg.diagnostic}")
    out: list[str] = []
    for span in seg.spans:
        out.append(episode_open(span.index))
        out.extend(seg.episode_tokens(span))
        out.append(episode_close(span.index))
    out.extend([ANSWER_TAG, seg.answer])
    if seg.terminated:
        out.append(EOS)
    return tuple(out)


def episode_of_token(seg: SegmentedTrajectory, t: int) -> int:
    """位置 t が属するエピソード番号 (タグは囲むエピソードに属する)

    回答領域および解析できた接頭辞より後ろのトークンは ANSWER_REGION。
    """
    if not 0 <= t < len(seg.tokens):
        raise IndexError(f"位置 {t} は系列の範囲外です (長さ {len(seg.tokens)})")
    for span in seg.spans:
        if span.start - 1 <= t <= span.end + 1:
            return span.index
    return ANSWER_REGION


def episode_region_map(seg: SegmentedTrajectory) -> list[int]:
    return [episode_of_token(seg, t) for t in range(len(seg.tokens))]
