"""
算術チェーン課題モジュール - 課題生成・検証器・過程妥当性・4 群の合成データ
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from gc2po_lab.models.episode import SegmentedTrajectory, parse_episodes
from gc2po_lab.models.policy import Trajectory
from gc2po_lab.models.vocabulary import (
    ANSWER_TAG,
    EOS,
    EQUALS,
    MAX_ANSWER,
    OPERATORS,
    QUESTION_CLOSE,
    QUESTION_OPEN,
    episode_close,
    episode_open,
    step_marker,
)
from gc2po_lab.utils.config import TaskConfig

NEAR_IDEAL = "near-ideal"
NEAR_MISS = "near-miss"
LUCKY_GUESS = "lucky-guess"
FULLY_BAD = "fully-bad"
GROUPS = (NEAR_IDEAL, NEAR_MISS, LUCKY_GUESS, FULLY_BAD)

SLICE_LONG = "long"
SLICE_RANGE = "range"
SLICE_PERM = "perm"
SHIFT_SLICES = (SLICE_LONG, SLICE_RANGE, SLICE_PERM)

HIGH_VALIDITY = 0.9
LOW_VALIDITY = 0.3


class InfeasibleTaskError(ValueError):
    """制約を満たす課題が作れない"""


def apply_operation(value: int, op: str, operand: int) -> int:
    if op == "+":
        return value + operand
    if op == "-":
        return value - operand
    if op == "*":
        return value * operand
    raise ValueError(f"サポートされていない演算子です: {op}")


@dataclass(frozen=True)
class Operation:
    op: str
    operand: int


@dataclass(frozen=True)
class ArithmeticTask:
    """開始値と演算列からなる課題。order は質問文での列挙順。"""

    start: int
    operations: tuple[Operation, ...]
    order: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.operations:
            raise InfeasibleTaskError("演算列が空です")
        if not self.order:
            object.__setattr__(self, "order", tuple(range(len(self.operations))))
        if sorted(self.order) != list(range(len(self.operations))):
            raise ValueError(f"列挙順が演算列の置換になっていません: {self.order}")

    @property
    def chain_length(self) -> int:
        return len(self.operations)

    @property
    def intermediates(self) -> tuple[int, ...]:
        """各ステップ後の値 (逐次評価)"""
        values: list[int] = []
        current = self.start
        for operation in self.operations:
            current = apply_operation(current, operation.op, operation.operand)
            values.append(current)
        return tuple(values)

    @property
    def answer(self) -> int:
        return self.intermediates[-1]

    @property
    def answer_symbol(self) -> str:
        return str(self.answer)

    @property
    def question(self) -> tuple[str, ...]:
        tokens = [QUESTION_OPEN, str(self.start)]
        for i in self.order:
            operation = self.operations[i]
            tokens.extend([step_marker(i + 1), operation.op, str(operation.operand)])
        tokens.append(QUESTION_CLOSE)
        return tuple(tokens)

    def canonical_solution(self) -> tuple[str, ...]:
        """1 エピソード 1 演算の正準解"""
        return build_solution(self, list(self.intermediates), self.answer)

    def to_record(self, fingerprint: str = "") -> dict[str, Any]:
        return {
            "question": list(self.question),
            "start": self.start,
            "operations": [[o.op, o.operand] for o in self.operations],
            "order": list(self.order),
            "answer": self.answer,
            "intermediates": list(self.intermediates),
            "chain_length": self.chain_length,
            "fingerprint": fingerprint,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "ArithmeticTask":
        task = cls(
            start=int(record["start"]),
            operations=tuple(Operation(str(op), int(n)) for op, n in record["operations"]),
            order=tuple(int(i) for i in record["order"]),
        )
        if task.answer != int(record["answer"]):
            raise ValueError(f"記録された正解 {record['answer']} が逐次評価 {task.answer} と一致しません")
        return task


def build_solution(task: ArithmeticTask, declared: Sequence[int], answer: int) -> tuple[str, ...]:
    """宣言された途中値と最終回答からタグ付き解を組み立てる"""
    tokens: list[str] = []
    previous = task.start
    for i, operation in enumerate(task.operations):
        index = i + 1
        tokens.extend(
            [
                episode_open(index),
                str(previous),
                operation.op,
                str(operation.operand),
                EQUALS,
                str(declared[i]),
                episode_close(index),
            ]
        )
        previous = declared[i]
    tokens.extend([ANSWER_TAG, str(answer), EOS])
    return tuple(tokens)


def _check_operand_range(operand_range: tuple[int, int]) -> tuple[int, int]:
    low, high = operand_range
    if not (0 <= low <= high <= 9):
        raise InfeasibleTaskError(f"被演算子の範囲は 0〜9 の 1 桁である必要があります: {operand_range}")
    return low, high


def generate_task(
    rng: np.random.Generator, chain_length: int, operand_range: tuple[int, int] = (1, 6)
) -> ArithmeticTask:
    """途中値がすべて [0, 99] に収まる課題をシード付きで生成する"""
    if chain_length < 1:
        raise InfeasibleTaskError(f"チェーン長は 1 以上である必要があります: {chain_length}")
    low, high = _check_operand_range(operand_range)

    current = int(rng.integers(low, high + 1))
    start = current
    operations: list[Operation] = []
    for _ in range(chain_length):
        candidates = [
            Operation(op, n)
            for op in OPERATORS
            for n in range(low, high + 1)
            if 0 <= apply_operation(current, op, n) <= MAX_ANSWER
        ]
        if not candidates:
            raise InfeasibleTaskError(f"値 {current} から範囲内に収まる演算がありません: {operand_range}")
        chosen = candidates[int(rng.integers(len(candidates)))]
        operations.append(chosen)
        current = apply_operation(current, chosen.op, chosen.operand)
    return ArithmeticTask(start=start, operations=tuple(operations))


def generate_task_set(rng: np.random.Generator, config: TaskConfig, count: int) -> list[ArithmeticTask]:
    """学習分布からの課題集合"""
    lengths = list(config.chain_lengths)
    return [
        generate_task(rng, lengths[int(rng.integers(len(lengths)))], tuple(config.operand_range))  # type: ignore
        for _ in range(count)
    ]


def verify(trajectory: Trajectory | Sequence[str], task: ArithmeticTask) -> int:
    """構造的に正しく、かつ回答が正解と一致するときだけ 1"""
    tokens = trajectory.tokens if isinstance(trajectory, Trajectory) else tuple(trajectory)
    seg = parse_episodes(tokens)
    return int(seg.valid and seg.answer == task.answer_symbol)


def declared_values(seg: SegmentedTrajectory) -> list[str | None]:
    """各エピソードが宣言した途中値 (最後の内容トークン)"""
    values: list[str | None] = []
    for span in seg.spans:
        content = seg.episode_tokens(span)
        values.append(content[-1] if content else None)
    return values


def process_validity(trajectory: Trajectory | SegmentedTrajectory | Sequence[str], task: ArithmeticTask) -> float:
    """途中値が正しいエピソードの割合 (不正な列は 0)。分母は max(L, E)。"""
    if isinstance(trajectory, SegmentedTrajectory):
        seg = trajectory
    elif isinstance(trajectory, Trajectory):
        seg = parse_episodes(trajectory.tokens)
    else:
        seg = parse_episodes(trajectory)
    if not seg.valid or seg.num_episodes == 0:
        return 0.0
    truth = task.intermediates
    correct = sum(
        1 for i, value in enumerate(declared_values(seg)) if i < len(truth) and value == str(truth[i])
    )
    return correct / max(seg.num_episodes, len(truth))


def label_group(final_correct: int, validity: float) -> str | None:
    """(f, p) から 4 群のどれに属するかを判定する (どれにも属さなければ None)"""
    if validity >= HIGH_VALIDITY:
        return NEAR_IDEAL if final_correct == 1 else NEAR_MISS
    if validity <= LOW_VALIDITY:
        return LUCKY_GUESS if final_correct == 1 else FULLY_BAD
    return None


@dataclass
class LabeledTrajectory:
    """最終正解 f と過程妥当性 p のラベル付き軌跡"""

    task: ArithmeticTask
    trajectory: Trajectory
    segmented: SegmentedTrajectory
    final_correct: int
    validity: float
    group: str
    extras: dict[str, Any] = field(default_factory=dict)  # type: ignore


def _wrong_value(rng: np.random.Generator, truth: int) -> int:
    value = int(rng.integers(0, MAX_ANSWER))
    return value + 1 if value >= truth else value


def synthesize_groups(
    rng: np.random.Generator,
    counts: int | Mapping[str, int],
    chain_lengths: Sequence[int] = (2, 3, 4),
    operand_range: tuple[int, int] = (1, 6),
) -> list[LabeledTrajectory]:
    """途中値と最終回答の正誤を植え込んで 4 群の軌跡を作る"""
    per_group = {g: counts for g in GROUPS} if isinstance(counts, int) else dict(counts)
    for group, count in per_group.items():
        if group not in GROUPS:
            raise ValueError(f"不明な群です: {group}")
        if count < 1:
            raise ValueError(f"群 {group} の件数は 1 以上である必要があります: {count}")

    items: list[LabeledTrajectory] = []
    for group in GROUPS:
        for _ in range(per_group.get(group, 0)):
            task = generate_task(rng, int(chain_lengths[int(rng.integers(len(chain_lengths)))]), operand_range)
            truth = list(task.intermediates)
            valid_process = group in (NEAR_IDEAL, NEAR_MISS)
            correct_answer = group in (NEAR_IDEAL, LUCKY_GUESS)
            declared = truth if valid_process else [_wrong_value(rng, v) for v in truth]
            answer = task.answer if correct_answer else _wrong_value(rng, task.answer)
            tokens = build_solution(task, declared, answer)
            trajectory = Trajectory(
                question=task.question, tokens=tokens, old_logprobs=np.zeros(len(tokens)), answer=str(answer)
            )
            trajectory.r_out = verify(trajectory, task)
            seg = parse_episodes(tokens)
            validity = process_validity(seg, task)
            items.append(
                LabeledTrajectory(
                    task=task,
                    trajectory=trajectory,
                    segmented=seg,
                    final_correct=trajectory.r_out,
                    validity=validity,
                    group=group,
                )
            )
    return items


def _non_identity_order(rng: np.random.Generator, length: int) -> tuple[int, ...]:
    identity = tuple(range(length))
    while True:
        order = tuple(int(i) for i in rng.permutation(length))
        if order != identity:
            return order


def shift_eval_set(rng: np.random.Generator, config: TaskConfig, count: int | None = None) -> dict[str, list[ArithmeticTask]]:
    """分布シフト評価用の 3 スライス (長いチェーン・未知の被演算子範囲・列挙順の置換)"""
    n = config.eval_questions if count is None else count
    lengths = list(config.chain_lengths)
    operand_range: tuple[int, int] = (config.operand_range[0], config.operand_range[1])
    shift_range: tuple[int, int] = (config.shift_operand_range[0], config.shift_operand_range[1])
    long_length = config.longest_chain

    long_slice = [generate_task(rng, long_length, operand_range) for _ in range(n)]
    range_slice = [
        generate_task(rng, lengths[int(rng.integers(len(lengths)))], shift_range) for _ in range(n)
    ]
    perm_slice: list[ArithmeticTask] = []
    for _ in range(n):
        length = max(2, lengths[int(rng.integers(len(lengths)))])
        base = generate_task(rng, length, operand_range)
        perm_slice.append(
            ArithmeticTask(start=base.start, operations=base.operations, order=_non_identity_order(rng, length))
        )
    return {SLICE_LONG: long_slice, SLICE_RANGE: range_slice, SLICE_PERM: perm_slice}


def config_fingerprint(config: TaskConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_tasks(tasks: Iterable[ArithmeticTask], path: Path, fingerprint: str = "") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for task in tasks:
            f.write(json.dumps(task.to_record(fingerprint), sort_keys=True) + "\n")
    return path


def load_tasks(path: Path) -> list[ArithmeticTask]:
    with open(path, encoding="utf-8") as f:
        return [ArithmeticTask.from_record(json.loads(line)) for line in f if line.strip()]
