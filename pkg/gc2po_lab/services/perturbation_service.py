"""
摂動サービスモジュール - 潜在表現 u に作用する摂動作用素 g_m の族
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from gc2po_lab.models.tensor import DomainError, FloatArray, ShapeError

PerturbationKind = Literal["gaussian", "coordinate-mask", "contraction", "composite"]
OperatorKind = Literal["identity", "gaussian", "coordinate-mask", "contraction"]

PERTURBATION_KINDS: tuple[str, ...] = ("gaussian", "coordinate-mask", "contraction", "composite")
_CONCRETE_KINDS: tuple[OperatorKind, ...] = ("gaussian", "coordinate-mask", "contraction")
_SEED_BITS = 2**63 - 1


@dataclass
class PerturbationSpec:
    """摂動族の設定 (composite は 3 種の等確率混合)"""

    kind: str = "composite"
    sigma: float = 0.1
    keep_prob: float = 0.9
    alpha_min: float = 0.5
    count: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"サポートされていない摂動の種類です: {self.kind}")
        if self.count < 1:
            raise ValueError(f"摂動の個数 M は 1 以上である必要があります: {self.count}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma は 0 以上の有限値である必要があります: {self.sigma}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob は (0, 1] の範囲である必要があります: {self.keep_prob}")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError(f"alpha_min は (0, 1] の範囲である必要があります: {self.alpha_min}")


@dataclass(frozen=True)
class PerturbationOperator:
    """具体的な摂動作用素 1 つ。同じ作用素は同じ u に対して常に同じ ũ を返す。"""

    kind: OperatorKind
    seed: int = 0
    sigma: float = 0.0
    keep_prob: float = 1.0
    alpha: float = 1.0

    def to_record(self) -> dict[str, float | int | str]:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "sigma": self.sigma,
            "keep_prob": self.keep_prob,
            "alpha": self.alpha,
        }


def identity_operator() -> PerturbationOperator:
    return PerturbationOperator(kind="identity")


def sample_operators(spec: PerturbationSpec, rng: np.random.Generator) -> list[PerturbationOperator]:
    """族から M 個の作用素を独立に引く

    Args:
        spec: 摂動族の設定
        rng: 乱数生成器 (同じ状態からは同じ作用素列が得られる)

    Returns:
        list[PerturbationOperator]: M 個の具体的な作用素
    """
    spec.validate()
    operators: list[PerturbationOperator] = []
    for _ in range(spec.count):
        if spec.kind == "composite":
            kind = _CONCRETE_KINDS[int(rng.integers(len(_CONCRETE_KINDS)))]
        else:
            kind = spec.kind  # type: ignore
        seed = int(rng.integers(_SEED_BITS))
        alpha = float(rng.uniform(spec.alpha_min, 1.0)) if kind == "contraction" else 1.0
        operators.append(
            PerturbationOperator(kind=kind, seed=seed, sigma=spec.sigma, keep_prob=spec.keep_prob, alpha=alpha)
        )
    return operators


def apply(operator: PerturbationOperator, u: FloatArray) -> FloatArray:
    """ũ = g_m(u) を計算する"""
    vector = np.asarray(u, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise ShapeError(f"u は 1 次元の非空ベクトルである必要があります: shape={list(vector.shape)}")
    if not np.all(np.isfinite(vector)):
        raise DomainError("u に非有限値が含まれています")

    if operator.kind == "identity":
        return vector.copy()
    if operator.kind == "contraction":
        return operator.alpha * vector

    rng = np.random.default_rng(operator.seed)
    if operator.kind == "gaussian":
        scale = operator.sigma * float(np.linalg.norm(vector)) / np.sqrt(vector.size)
        return vector + scale * rng.standard_normal(vector.size)
    if operator.kind == "coordinate-mask":
        keep = rng.random(vector.size) < operator.keep_prob
        return np.where(keep, vector / operator.keep_prob, 0.0)
    raise ValueError(f"サポートされていない摂動の種類です: {operator.kind}")


def apply_all(operators: list[PerturbationOperator], u: FloatArray) -> list[FloatArray]:
    return [apply(op, u) for op in operators]
