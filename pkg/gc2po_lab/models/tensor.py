"""
テンソル演算モジュール - 逆伝播テープ付きの最小限の密テンソル

方策の順伝播と目的関数の勾配に必要な演算だけを持つ。値はすべて float64。
ブロードキャストは「同一形状」か「片方がスカラー」の場合に限る。
"""

from __future__ import annotations

import contextvars
import types
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

ElementwiseOp = Literal["add", "subtract", "multiply", "divide", "exp", "log", "negate"]

BackwardFn = Callable[[FloatArray], tuple[FloatArray | None, ...]]


class ShapeError(ValueError):
    """形状の不一致"""


class DomainError(ValueError):
    """定義域外の入力 (log の非正値、ゼロ除算、非有限値など)"""


_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """値 (読み取り専用) と勾配アキュムレータを持つテンソル"""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values: npt.ArrayLike, requires_grad: bool = False) -> None:
        array = np.array(values, dtype=np.float64)
        array.setflags(write=False)
        self.values: FloatArray = array
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"スカラーではないテンソルです: shape={self.shape}")
        return float(self.values.reshape(-1)[0])

    def grad_or_zeros(self) -> FloatArray:
        """勾配を返す (未計算ならゼロ)"""
        if self.grad is None:
            return np.zeros_like(self.values)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float) -> Tensor:
        return add(_lift(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return subtract(self, other)

    def __rsub__(self, other: float) -> Tensor:
        return subtract(_lift(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return multiply(self, other)

    def __rmul__(self, other: float) -> Tensor:
        return multiply(_lift(other), self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return divide(self, other)

    def __rtruediv__(self, other: float) -> Tensor:
        return divide(_lift(other), self)

    def __neg__(self) -> Tensor:
        return negate(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass
class TapeEntry:
    """テープ上の 1 演算 (入力ノード → 出力ノード)"""

    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """演算の記録。with ブロック内で有効になり、抜けると閉じる。

    記録順がそのままトポロジカル順になる (入力は必ず先に作られている)。
    """

    entries: list[TapeEntry] = field(default_factory=list)  # type: ignore
    closed: bool = False
    _token: contextvars.Token[Tape | None] | None = None

    def __enter__(self) -> Tape:
        if self.closed:
            raise RuntimeError("閉じたテープは再利用できません")
        self._token = _active_tape.set(self)
        return self

    def __exit__(
        self, exc_type: type[BaseException] | None, exc_val: BaseException | None, exc_tb: types.TracebackType | None
    ) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None
        self.closed = True

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self.entries.append(TapeEntry(output=output, inputs=inputs, backward=backward_fn))


def constant(values: npt.ArrayLike) -> Tensor:
    """勾配を追跡しない定数テンソル"""
    return Tensor(values, requires_grad=False)


def parameter(values: npt.ArrayLike) -> Tensor:
    """勾配を追跡する葉テンソル"""
    return Tensor(values, requires_grad=True)


def _lift(value: Tensor | float) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return constant(value)


def _emit(values: FloatArray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """演算結果を作り、必要ならテープに記録する"""
    tape = _active_tape.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=tracked)
    if tracked and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.values.ndim == 0


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"形状が一致しません: {list(a.shape)} と {list(b.shape)}")


def _reduce_to(grad: FloatArray, target: Tensor) -> FloatArray:
    """スカラー側へブロードキャストされた勾配を畳み込む"""
    if _is_scalar(target) and grad.ndim != 0:
        return np.asarray(grad.sum(), dtype=np.float64)
    return grad


# --- 要素ごとの演算 ---


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    _check_broadcast(ta, tb)
    return _emit(ta.values + tb.values, (ta, tb), lambda g: (_reduce_to(g, ta), _reduce_to(g, tb)))


def subtract(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    _check_broadcast(ta, tb)
    return _emit(ta.values - tb.values, (ta, tb), lambda g: (_reduce_to(g, ta), _reduce_to(-g, tb)))


def multiply(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    _check_broadcast(ta, tb)
    return _emit(
        ta.values * tb.values,
        (ta, tb),
        lambda g: (_reduce_to(g * tb.values, ta), _reduce_to(g * ta.values, tb)),
    )


def divide(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    _check_broadcast(ta, tb)
    if np.any(tb.values == 0.0):
        raise DomainError("ゼロによる除算です")
    quotient = ta.values / tb.values
    return _emit(
        quotient,
        (ta, tb),
        lambda g: (_reduce_to(g / tb.values, ta), _reduce_to(-g * quotient / tb.values, tb)),
    )


def negate(a: Tensor) -> Tensor:
    return _emit(-a.values, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    result = np.exp(a.values)
    return _emit(result, (a,), lambda g: (g * result,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError(f"log の引数に非正の値が含まれています: min={float(np.min(a.values))}")
    return _emit(np.log(a.values), (a,), lambda g: (g / a.values,))


def tanh(a: Tensor) -> Tensor:
    result = np.tanh(a.values)
    return _emit(result, (a,), lambda g: (g * (1.0 - result * result),))


def elementwise(op: ElementwiseOp, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """演算種別を指定して要素ごとの演算を行う"""
    binary: dict[str, Callable[[Tensor | float, Tensor | float], Tensor]] = {
        "add": add,
        "subtract": subtract,
        "multiply": multiply,
        "divide": divide,
    }
    unary: dict[str, Callable[[Tensor], Tensor]] = {"exp": exp, "log": log, "negate": negate}
    if op in binary:
        if b is None:
            raise ValueError(f"二項演算 {op} には第 2 引数が必要です")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"サポートされていない演算です: {op}")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """要素ごとの最小値。同値のときは a 側に勾配を流す。"""
    _check_broadcast(a, b)
    choose_a = a.values <= b.values
    return _emit(
        np.where(choose_a, a.values, b.values),
        (a, b),
        lambda g: (_reduce_to(np.where(choose_a, g, 0.0), a), _reduce_to(np.where(choose_a, 0.0, g), b)),
    )


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """区間 [low, high] への切り詰め。区間外では勾配 0。"""
    inside = (a.values >= low) & (a.values <= high)
    return _emit(np.clip(a.values, low, high), (a,), lambda g: (np.where(inside, g, 0.0),))


# --- 行列演算 ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul は 2 次元テンソルのみ対応します: {list(a.shape)} と {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"内側の次元が一致しません: {list(a.shape)} と {list(b.shape)}")
    return _emit(a.values @ b.values, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose は 2 次元テンソルのみ対応します: {list(a.shape)}")
    return _emit(a.values.T, (a,), lambda g: (g.T,))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """最大値を引いてから正規化するソフトマックス"""
    if not np.all(np.isfinite(logits.values)):
        raise DomainError("softmax の入力に非有限値が含まれています")
    shifted = logits.values - np.max(logits.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (probs * (g - np.sum(g * probs, axis=axis, keepdims=True)),)

    return _emit(probs, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(logits.values)):
        raise DomainError("log_softmax の入力に非有限値が含まれています")
    shifted = logits.values - np.max(logits.values, axis=axis, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    result = shifted - log_norm
    probs = np.exp(result)

    def backward(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _emit(result, (logits,), backward)


# --- 集約・索引 ---


def total(a: Tensor) -> Tensor:
    """全要素の和 (スカラー)"""
    return _emit(np.asarray(np.sum(a.values), dtype=np.float64), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    """全要素の平均 (スカラー)"""
    if a.size == 0:
        raise ShapeError("空テンソルの平均は定義されません")
    n = a.size
    return _emit(
        np.asarray(np.mean(a.values), dtype=np.float64), (a,), lambda g: (np.full(a.shape, float(g) / n),)
    )


def take_rows(a: Tensor, indices: Sequence[int] | IntArray) -> Tensor:
    """行の取り出し (埋め込み参照)。同じ行を複数回参照した勾配は加算される。"""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g: FloatArray) -> tuple[FloatArray | None, ...]:
        grad = np.zeros_like(a.values)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit(a.values[idx], (a,), backward)


def pick(a: Tensor, rows: Sequence[int] | IntArray, cols: Sequence[int] | IntArray) -> Tensor:
    """(rows[i], cols[i]) の要素を集めた 1 次元テンソル"""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if r.shape != c.shape:
        raise ShapeError(f"行と列の索引数が一致しません: {list(r.shape)} と {list(c.shape)}")

    def backward(g: FloatArray) -> tuple[FloatArray | None, ...]:
        grad = np.zeros_like(a.values)
        np.add.at(grad, (r, c), g)
        return (grad,)

    return _emit(a.values[r, c], (a,), backward)


# --- 逆伝播 ---


def backward(tape: Tape, root: Tensor) -> list[Tensor]:
    """テープを逆順にたどり、葉テンソルの grad に勾配を加算する

    Returns:
        勾配を受け取った葉テンソルのリスト
    """
    if root.size != 1:
        raise ShapeError(f"逆伝播の起点はスカラーである必要があります: shape={root.shape}")
    if not tape.closed:
        raise RuntimeError("テープが閉じられていません (with ブロックの外で backward を呼んでください)")

    grads: dict[int, FloatArray] = {id(root): np.ones_like(root.values)}
    produced: set[int] = {id(entry.output) for entry in tape.entries}
    leaves: dict[int, Tensor] = {}

    for entry in reversed(tape.entries):
        upstream = grads.pop(id(entry.output), None)
        if upstream is None:
            continue
        for tensor, local in zip(entry.inputs, entry.backward(upstream)):
            if local is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + local if key in grads else local
            if key not in produced:
                leaves[key] = tensor

    if id(root) not in produced and root.requires_grad:
        leaves[id(root)] = root

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return list(leaves.values())
