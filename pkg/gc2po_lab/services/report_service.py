"""
記録サービスモジュール - metrics.csv / diagnostics.csv / trajectories.jsonl / 集計表の書き出しと stdout への表示
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, TextIO

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
TRAJECTORIES_FILE = "trajectories.jsonl"
RESOLVED_CONFIG_FILE = "config.resolved"


@dataclass
class MetricRecord:
    """外側の反復 1 回分の指標"""

    iteration: int
    mean_r_out: float
    pass1_in: float
    pass1_long: float
    pass1_range: float
    pass1_perm: float
    mean_s_sta: float
    mean_s_exp: float
    mean_r_cf: float
    grad_norm: float
    objective: float
    seconds: float = 0.0

    def __post_init__(self) -> None:
        for name in ("pass1_in", "pass1_long", "pass1_range", "pass1_perm"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} は [0, 1] の範囲である必要があります: {value}")
        if self.grad_norm < 0:
            raise ValueError(f"勾配ノルムは 0 以上である必要があります: {self.grad_norm}")


@dataclass
class DiagnosticRecord:
    """クリップ率などの安定性の診断値"""

    iteration: int
    clip_frac_mean: float
    clip_frac_max: float
    kl_mean: float
    mean_episodes: float


METRICS_HEADER = tuple(f.name for f in fields(MetricRecord))
DIAGNOSTICS_HEADER = tuple(f.name for f in fields(DiagnosticRecord))


class CsvRecordWriter:
    """dataclass の行を 1 行ずつ追記し、毎回フラッシュする単一の書き手"""

    def __init__(self, path: Path, header: Sequence[str]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self.header = tuple(header)
        self._file: TextIO = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self.header)
        self._file.flush()
        self._last_iteration: int | None = None

    def write(self, record: Any) -> None:
        row = asdict(record)
        iteration = row.get("iteration")
        if iteration is not None and self._last_iteration is not None and iteration <= self._last_iteration:
            raise ValueError(f"反復番号が単調増加していません: {self._last_iteration} → {iteration}")
        self._last_iteration = iteration
        self._writer.writerow([row[name] for name in self.header])
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "CsvRecordWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def metrics_writer(directory: Path) -> CsvRecordWriter:
    return CsvRecordWriter(directory / METRICS_FILE, METRICS_HEADER)


def diagnostics_writer(directory: Path) -> CsvRecordWriter:
    return CsvRecordWriter(directory / DIAGNOSTICS_FILE, DIAGNOSTICS_HEADER)


class TrajectoryLog:
    """1 グループ 1 行の JSONL ログ"""

    def __init__(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._file: TextIO = open(path, "w", encoding="utf-8")

    def write(self, record: Mapping[str, Any]) -> None:
        self._file.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "TrajectoryLog":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_table(rows: Iterable[Mapping[str, Any]], path: Path) -> Path:
    """集計表 (compare / sweep の結果) を CSV で書き出す"""
    rows = list(rows)
    if not rows:
        raise ValueError("書き出す行がありません")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def post_to_stdout(title: str, rows: Sequence[Mapping[str, Any]], notes: Sequence[str] = ()) -> None:
    """
    集計結果を STDOUT に表示する

    Args:
        title: 見出し
        rows: 表の行 (キーが列名)
        notes: 表の後に表示する補足
    """
    print("\n" + "=" * 50)
    print(f"📊 {title}")
    print("=" * 50)
    if rows:
        columns = list(rows[0].keys())
        print(" | ".join(columns))
        for row in rows:
            print(" | ".join(_format_cell(row[c]) for c in columns))
    print("=" * 50)
    for note in notes:
        print(f"⚠️ {note}")
    print()


def _format_cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
