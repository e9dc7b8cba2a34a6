#!/usr/bin/env python
import argparse
import asyncio
import dataclasses
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from gc2po_lab.models.policy import load_checkpoint
from gc2po_lab.models.task import config_fingerprint, load_tasks, save_tasks
from gc2po_lab.models.vocabulary import build_vocabulary
from gc2po_lab.services.analysis_service import SWEEP_PARAMS, analyze_checkpoint, compare, sweep
from gc2po_lab.services.report_service import post_to_stdout, write_table
from gc2po_lab.services.train_service import build_task_sets, evaluate, task_sequence, train_async
from gc2po_lab.utils.config import (
    METHOD_GC2PO,
    METHOD_GRPO,
    METHOD_NAMES,
    ConfigError,
    RunConfig,
    load_config,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

TASK_FILES = {
    "in": "eval_in.jsonl",
    "long": "eval_long.jsonl",
    "range": "eval_range.jsonl",
    "perm": "eval_perm.jsonl",
}


def _load(args: argparse.Namespace) -> RunConfig:
    """--config / --seed / --seeds / --out を反映した設定"""
    config = load_config(Path(args.config)) if args.config else RunConfig()
    seeds = config.seeds
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError(f"--seeds は 1 以上である必要があります: {args.seeds}")
        base = args.seed if args.seed is not None else seeds[0]
        seeds = tuple(range(base, base + args.seeds))
    elif args.seed is not None:
        seeds = (args.seed,)
    config = dataclasses.replace(config, seeds=seeds)
    if args.out:
        config = dataclasses.replace(config, output_dir=str(args.out))
    config.validate()
    return config


async def run_train(args: argparse.Namespace) -> None:
    config = _load(args)
    if args.verbose:
        print(f"🔧 {config.method} を seeds={list(config.seeds)} で学習します (事前学習 {config.warmup.steps} ステップ)...")
    results = await train_async(config, progress=args.verbose)
    for result in results:
        final = result.final
        if args.verbose:
            print(f"✅ seed={result.seed}: 記録を {result.output_dir} に保存しました。")
        print(
            f"seed={result.seed} pass@1 in={final.pass1_in:.3f} long={final.pass1_long:.3f} "
            f"range={final.pass1_range:.3f} perm={final.pass1_perm:.3f}"
        )


async def run_eval(args: argparse.Namespace) -> None:
    config = _load(args)
    params = load_checkpoint(Path(args.checkpoint), vocab=build_vocabulary())
    if args.tasks:
        task_sets = {Path(p).stem: load_tasks(Path(p)) for p in args.tasks}
    else:
        task_sets = build_task_sets(config, task_sequence(config.seeds[0])).evaluation
    if args.verbose:
        print(f"📊 {args.checkpoint} を {len(task_sets)} 個の課題集合で評価しています...")
    rows = [{"tasks": name, "pass1": evaluate(params, tasks, config.hyper.max_len)} for name, tasks in task_sets.items()]
    post_to_stdout("pass@1", rows)


async def run_analyze(args: argparse.Namespace) -> None:
    config = _load(args)
    params = load_checkpoint(Path(args.checkpoint), vocab=build_vocabulary())
    if args.verbose:
        print(f"🔍 4 群 × {args.per_group} 本の合成軌跡で報酬を分析しています...")
    report = analyze_checkpoint(
        params,
        args.per_group,
        config.perturbation,
        config.hyper,
        config.task,
        seed=config.seeds[0],
        probe_steps=args.probe_steps,
    )
    rows = report.rows()
    if args.out:
        path = write_table(rows, Path(args.out) / "analysis.csv")
        if args.verbose:
            print(f"✅ 分析結果を {path} に保存しました。")
    post_to_stdout("報酬と (f, p) の相関・群ごとの平均", rows, report.flags)


async def run_gen_tasks(args: argparse.Namespace) -> None:
    config = _load(args)
    out = Path(args.out) if args.out else config.resolve_output_dir() / "tasks"
    fingerprint = config_fingerprint(config.task)
    task_sets = build_task_sets(config, task_sequence(config.seeds[0]))
    save_tasks(task_sets.train, out / "train.jsonl", fingerprint)
    for name, tasks in task_sets.evaluation.items():
        save_tasks(tasks, out / TASK_FILES[name], fingerprint)
    if args.verbose:
        print(f"✅ 課題集合を {out} に保存しました (fingerprint={fingerprint[:12]})。")


async def run_compare(args: argparse.Namespace) -> None:
    config = _load(args)
    out = config.resolve_output_dir() if config.output_dir else config.resolve_output_dir().parent / "compare"
    methods = args.methods.split(",") if args.methods else [METHOD_GRPO, METHOD_GC2PO]
    if args.verbose:
        print(f"🚀 {', '.join(methods)} を {len(config.seeds)} シードで比較します...")
    rows = await compare(config, methods, out, parallel=args.parallel)
    path = write_table(rows, out / "compare.csv")
    if args.verbose:
        print(f"✅ 比較表を {path} に保存しました。")
    post_to_stdout("手法ごとの pass@1 (平均 ± 標準偏差)", rows)


async def run_sweep(args: argparse.Namespace) -> None:
    config = _load(args)
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError as err:
        raise ConfigError(f"--values は数値のカンマ区切りである必要があります: {args.values}") from err
    out = config.resolve_output_dir() if config.output_dir else config.resolve_output_dir().parent / "sweep"
    if args.verbose:
        print(f"🚀 {args.param} を {values} で掃引します...")
    rows = await sweep(config, args.param, values, out, parallel=args.parallel)
    path = write_table(rows, out / f"sweep_{args.param}.csv")
    if args.verbose:
        print(f"✅ 掃引結果を {path} に保存しました。")
    post_to_stdout(f"{args.param} の掃引結果", rows)


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "analyze": run_analyze,
    "gen-tasks": run_gen_tasks,
    "compare": run_compare,
    "sweep": run_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="GC²PO と GRPO を比較する卓上強化学習ラボ")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, config_required: bool = False) -> None:
        sub.add_argument("-c", "--config", help="設定ファイル (TOML または JSON)", required=config_required)
        sub.add_argument("-s", "--seed", help="シード (設定ファイルの seeds を上書き)", type=int, default=None)
        sub.add_argument("-o", "--out", help="出力ディレクトリ", type=str, default=None)
        sub.add_argument("-v", "--verbose", help="詳細な出力を表示", action="store_true")

    common(subparsers.add_parser("train", help="強化学習を実行する"), config_required=True)

    eval_parser = subparsers.add_parser("eval", help="チェックポイントの pass@1 を測る")
    common(eval_parser)
    eval_parser.add_argument("--checkpoint", help="チェックポイント (.npz)", required=True)
    eval_parser.add_argument("--tasks", help="課題集合 (.jsonl、複数指定可)", action="append", default=[])

    analyze_parser = subparsers.add_parser("analyze", help="報酬と (f, p) の相関を分析する")
    common(analyze_parser)
    analyze_parser.add_argument("--checkpoint", help="チェックポイント (.npz)", required=True)
    analyze_parser.add_argument("--per-group", help="1 群あたりの軌跡数", type=int, default=200)
    analyze_parser.add_argument("--probe-steps", help="回答プローブの学習ステップ数", type=int, default=200)

    common(subparsers.add_parser("gen-tasks", help="課題集合を JSONL で書き出す"))

    compare_parser = subparsers.add_parser("compare", help="複数シードで手法を比較する")
    common(compare_parser)
    compare_parser.add_argument("--seeds", help="シード数", type=int, default=None)
    compare_parser.add_argument(
        "--methods", help=f"比較する手法 (カンマ区切り、選択肢: {', '.join(METHOD_NAMES)})", default=None
    )
    compare_parser.add_argument("--parallel", help="シードを別プロセスで並列に実行する", action="store_true")

    sweep_parser = subparsers.add_parser("sweep", help="λ_exp / λ_cf を掃引する")
    common(sweep_parser)
    sweep_parser.add_argument("--param", help="掃引対象", choices=SWEEP_PARAMS, required=True)
    sweep_parser.add_argument("--values", help="値 (カンマ区切り)", required=True)
    sweep_parser.add_argument("--seeds", help="シード数", type=int, default=None)
    sweep_parser.add_argument("--parallel", help="シードを別プロセスで並列に実行する", action="store_true")
    return parser


async def main_async(args: argparse.Namespace) -> None:
    """非同期メイン処理"""
    await COMMANDS[args.command](args)


def run(argv: list[str] | None = None) -> int:
    """引数を解析してサブコマンドを実行し、終了コードを返す"""
    # .envファイルの読み込み
    load_dotenv()

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if isinstance(err.code, int) else EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        asyncio.run(main_async(args))
    except ConfigError as err:
        print(f"エラー: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:
        print(f"エラー: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    """コマンドラインエントリーポイント"""
    sys.exit(run())


if __name__ == "__main__":
    main()
