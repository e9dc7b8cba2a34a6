"""
コマンドラインインターフェースのテスト
"""

import csv
from pathlib import Path

import pytest

from gc2po_lab.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, TASK_FILES, run
from gc2po_lab.models.task import load_tasks
from gc2po_lab.services.train_service import EVAL_SLICES

TINY_TOML = """
method = "grpo"
iterations = 1
rollout_workers = 1

[hyper]
group_size = 2
batch_size = 1
max_len = 16
hidden_dim = 4
num_perturbations = 2

[task]
train_questions = 2
eval_questions = 2
chain_lengths = [1]

[warmup]
steps = 1
batch_size = 1
"""


@pytest.fixture
def tiny_toml(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path


class TestUsage:
    """引数エラーのテスト"""

    def test_train_requires_config(self, capsys):
        assert run(["train"]) == EXIT_USAGE
        assert "--config" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert run(["gen-tasks", "--bogus"]) == EXIT_USAGE

    def test_missing_subcommand(self):
        assert run([]) == EXIT_USAGE

    def test_invalid_config(self, tmp_path: Path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("iterations = -1\n", encoding="utf-8")
        assert run(["train", "-c", str(path)]) == EXIT_USAGE
        assert "iterations" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path: Path):
        assert run(["train", "-c", str(tmp_path / "none.toml")]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path: Path, capsys):
        assert run(["eval", "--checkpoint", str(tmp_path / "none.npz")]) == EXIT_FAILURE
        assert "エラー" in capsys.readouterr().err


class TestGenTasks:
    """gen-tasksサブコマンドのテスト"""

    def test_writes_task_files(self, tiny_toml: Path, tmp_path: Path):
        out = tmp_path / "tasks"
        assert run(["gen-tasks", "-c", str(tiny_toml), "-o", str(out)]) == EXIT_OK
        assert len(load_tasks(out / "train.jsonl")) == 2
        for name in TASK_FILES.values():
            assert len(load_tasks(out / name)) == 2

    def test_same_seed_same_files(self, tiny_toml: Path, tmp_path: Path):
        run(["gen-tasks", "-c", str(tiny_toml), "-s", "3", "-o", str(tmp_path / "a")])
        run(["gen-tasks", "-c", str(tiny_toml), "-s", "3", "-o", str(tmp_path / "b")])
        for name in ("train.jsonl", *TASK_FILES.values()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
class TestTrainCommand:
    """train / evalサブコマンドのテスト"""

    def test_train_then_eval(self, tiny_toml: Path, tmp_path: Path, capsys):
        out = tmp_path / "run"
        assert run(["train", "-c", str(tiny_toml), "-o", str(out)]) == EXIT_OK
        assert "seed=0 pass@1 in=" in capsys.readouterr().out
        assert (out / "final.npz").exists()

        tasks = tmp_path / "tasks"
        run(["gen-tasks", "-c", str(tiny_toml), "-o", str(tasks)])
        code = run(
            ["eval", "-c", str(tiny_toml), "--checkpoint", str(out / "final.npz"), "--tasks", str(tasks / "eval_in.jsonl")]
        )
        assert code == EXIT_OK
        assert "📊 pass@1" in capsys.readouterr().out


@pytest.mark.slow
class TestCompareCommand:
    """compareサブコマンドのテスト"""

    def test_ablation_variants(self, tiny_toml: Path, tmp_path: Path, capsys):
        """3 種のアブレーションを含む比較表が手法ごとに 1 行ずつ書かれる"""
        out = tmp_path / "compare"
        methods = ["gc2po", "no-s_exp", "no-s_sta", "no-r_cf"]
        code = run(["compare", "-c", str(tiny_toml), "-o", str(out), "--seeds", "2", "--methods", ",".join(methods)])
        assert code == EXIT_OK
        assert "pass@1" in capsys.readouterr().out

        with open(out / "compare.csv", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [row["method"] for row in rows] == methods
        for row in rows:
            assert row["seeds"] == "2"
            for name in EVAL_SLICES:
                assert 0.0 <= float(row[f"pass1_{name}_mean"]) <= 1.0
                assert float(row[f"pass1_{name}_std"]) >= 0.0

        for method in methods:
            for seed in (0, 1):
                assert (out / method / f"seed_{seed}" / "final.npz").exists()
        # 反実仮想報酬を外した手法は R_cf を一度も計算しない
        with open(out / "no-r_cf" / "seed_0" / "metrics.csv", encoding="utf-8", newline="") as f:
            assert all(float(r["mean_r_cf"]) == 0.0 for r in csv.DictReader(f))
