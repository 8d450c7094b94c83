"""Command-line entry points: search, mine, filter, infer, losses.

Exit codes: 0 success, 1 usage error, 2 input error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import losses as L
from .critique import MiningStats, mine_tree
from .filtering import filter_dataset
from .gateway import (
    ChatClient,
    GatewayError,
    ModelGateway,
    RemoteGateway,
    ScriptedGateway,
    ScriptedPolicy,
    SyntheticGateway,
    load_templates,
)
from .mcts import run_search, tree_from_records, tree_to_records
from .plotting import plot_iterations, plot_success_histogram
from .refine import batch_eval
from .store import (
    REPORT_SCHEMA,
    SAMPLES_SCHEMA,
    TRACES_SCHEMA,
    BackendSettings,
    InputError,
    header,
    load_config,
    load_questions,
    read_jsonl,
    write_atomic,
    write_jsonl,
)
from .types import CritiqueSample, SearchConfig, stable_hash, validate

logger = logging.getLogger("stepcritic")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_gateway(backend: str, config: SearchConfig, settings: BackendSettings) -> ModelGateway:
    common = dict(
        step_token_cap=config.step_token_cap,
        max_path_tokens=config.max_path_tokens,
        retries=settings.retries,
        backoff=settings.backoff,
        score_fallback=settings.score_fallback,
        templates=load_templates(settings.templates_dir),
    )
    if backend == "remote":
        actor = ChatClient(settings.base_url, settings.model, api_key_env=settings.api_key_env,
                           timeout=settings.timeout)
        critic = None
        if settings.critic_model or settings.critic_base_url:
            critic = ChatClient(settings.critic_base_url or settings.base_url,
                                settings.critic_model or settings.model,
                                api_key_env=settings.api_key_env, timeout=settings.timeout)
        return RemoteGateway(actor, critic, **common)
    if settings.mock_script:
        try:
            policy = ScriptedPolicy.load(settings.mock_script, settings.mock_default)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot load mock script {settings.mock_script}: {exc}") from exc
        return ScriptedGateway(policy, **common)
    return SyntheticGateway(seed=config.seed, **settings.synthetic, **common)


def _setup(args) -> tuple[SearchConfig, BackendSettings, ModelGateway]:
    if args.config is not None and not Path(args.config).exists():
        raise InputError(f"config file not found: {args.config}")
    config, settings = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    if args.parallelism is not None:
        if args.parallelism < 1:
            raise UsageError("--parallelism must be ≥ 1")
        settings.parallelism = args.parallelism
    problems = validate(config)
    if problems:
        raise InputError("invalid config: " + "; ".join(problems))
    return config, settings, build_gateway(args.backend, config, settings)


def _safe_name(qid: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", qid)
    return safe if safe == qid else f"{safe}-{stable_hash(qid, 8)}"


def _pool_map(fn, items, parallelism: int):
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_search(args) -> int:
    config, settings, gateway = _setup(args)
    questions = load_questions(args.questions)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trees = _pool_map(lambda q: run_search(q, config, gateway), questions, settings.parallelism)
    partial = 0
    for tree in trees:
        write_jsonl(out_dir / f"tree_{_safe_name(tree.question.id)}.jsonl", tree_to_records(tree, config))
        partial += tree.partial
        print(f"{tree.question.id}: {len(tree.nodes)} nodes, {tree.iteration_count} iterations, "
              f"halt={tree.halt_reason}{' PARTIAL' if tree.partial else ''}", file=sys.stderr)
    print(f"search: {len(trees)} trees written to {out_dir}, {partial} partial", file=sys.stderr)
    return EXIT_BACKEND if partial else EXIT_OK


def cmd_mine(args) -> int:
    config, settings, gateway = _setup(args)
    tree_dir = Path(args.tree_dir)
    if not tree_dir.is_dir():
        raise InputError(f"tree directory not found: {tree_dir}")
    loaded, skipped = [], []
    for path in sorted(tree_dir.glob("*.jsonl")):
        try:
            contents = read_jsonl(path)
            if contents.malformed:
                raise ValueError(f"line {contents.malformed[0][0]}: {contents.malformed[0][1]}")
            tree, _ = tree_from_records([contents.header or {}] + [r for _, r in contents.rows])
        except (InputError, ValueError, KeyError, TypeError) as exc:
            skipped.append({"file": path.name, "error": str(exc)})
            continue
        loaded.append(tree)
    loaded.sort(key=lambda t: t.question.id)
    results = _pool_map(lambda t: mine_tree(t, gateway, config), loaded, settings.parallelism)
    stats = MiningStats()
    samples: list[CritiqueSample] = []
    for tree_samples, tree_stats in results:
        samples.extend(tree_samples)
        stats.merge(tree_stats)
    write_jsonl(args.out, [header(SAMPLES_SCHEMA, config, stage="mine")] + [s.to_dict() for s in samples])
    report = {"schema": REPORT_SCHEMA, "stage": "mine", "config_hash": config.hash(),
              **stats.to_dict(), "skipped_files": skipped}
    write_atomic(f"{args.out}.report.json", json.dumps(report, indent=2) + "\n")
    print(f"mine: {stats.positives} positives, {stats.negatives} negatives from {stats.trees} trees "
          f"({stats.no_reference} without reference, {len(skipped)} files skipped)", file=sys.stderr)
    return EXIT_OK


def cmd_filter(args) -> int:
    config, settings, gateway = _setup(args)
    contents = read_jsonl(args.samples)
    malformed = [lineno for lineno, _ in contents.malformed]
    samples = []
    for lineno, obj in contents.rows:
        try:
            samples.append(CritiqueSample.from_dict(obj))
        except (KeyError, TypeError, ValueError):
            malformed.append(lineno)
    kept, report = filter_dataset(samples, config, gateway, parallelism=settings.parallelism)
    report.malformed_lines = sorted(malformed)
    write_jsonl(args.out, [header(SAMPLES_SCHEMA, config, stage="filter")] + [s.to_dict() for s in kept])
    summary = {"schema": REPORT_SCHEMA, "stage": "filter", "config_hash": config.hash(),
               "keep_threshold": config.keep_threshold, **report.to_dict()}
    write_atomic(f"{args.out}.report.json", json.dumps(summary, indent=2) + "\n")
    plot_success_histogram(report.histogram, config.keep_threshold, f"{args.out}.report.png")
    for lineno in report.malformed_lines:
        print(f"filter: skipped malformed record at line {lineno}", file=sys.stderr)
    print(f"filter: kept {report.kept}/{report.negatives} negatives, {report.positives} positives passed, "
          f"{report.undetermined} undetermined", file=sys.stderr)
    return EXIT_BACKEND if report.undetermined else EXIT_OK


def cmd_infer(args) -> int:
    config, settings, gateway = _setup(args)
    questions = load_questions(args.questions)
    traces, report = batch_eval(questions, config, gateway, parallelism=settings.parallelism)
    write_jsonl(args.out, [header(TRACES_SCHEMA, config, stage="infer")] + [t.to_dict() for t in traces])
    write_atomic(f"{args.out}.report.tsv", report.to_table())
    summary = {"schema": REPORT_SCHEMA, "stage": "infer", "config_hash": config.hash(),
               "score_threshold": config.score_threshold, "max_refine_iters": config.max_refine_iters,
               **report.to_dict()}
    write_atomic(f"{args.out}.report.json", json.dumps(summary, indent=2) + "\n")
    plot_iterations([r.iteration for r in report.rows], report.accuracies(), report.n_refine(),
                    f"{args.out}.report.png")
    sys.stderr.write(report.to_table())
    return EXIT_BACKEND if report.n_errors else EXIT_OK


def cmd_losses(args) -> int:
    contents = read_jsonl(args.records)
    if contents.malformed:
        lineno, msg = contents.malformed[0]
        raise InputError(f"{args.records}:{lineno}: {msg}")
    lines = []
    for lineno, rec in contents.rows:
        try:
            weight = float(rec.get("lambda", args.weight))
            out: dict = {"line": lineno}
            if "probs" in rec:
                out["lm_loss"] = L.lm_loss([float(p) for p in rec["probs"]])
            if "v" in rec and "v_hat" in rec:
                out["score_loss"], out["clamped"] = L.score_loss_flagged(int(rec["v"]), float(rec["v_hat"]))
            if "lm_loss" in out and "score_loss" in out:
                out["total_loss"] = L.total_loss(out["lm_loss"], out["score_loss"], weight)
                out["lambda"] = weight
        except (TypeError, ValueError) as exc:
            raise InputError(f"{args.records}:{lineno}: {exc}") from exc
        lines.append(json.dumps(out))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--backend", choices=["remote", "mock"], default="remote")
    common.add_argument("--parallelism", type=int, help="worker pool size")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stepcritic", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", parents=[common], help="build one search tree per question")
    p.add_argument("questions")
    p.add_argument("--out", required=True, help="output directory for tree dumps")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("mine", parents=[common], help="mine critique samples from tree dumps")
    p.add_argument("tree_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("filter", parents=[common], help="keep critiques that lead to correct refinements")
    p.add_argument("samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("infer", parents=[common], help="iterative actor-critic inference")
    p.add_argument("questions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("losses", help="reference loss values for probability/label records")
    p.add_argument("records")
    p.add_argument("--out")
    p.add_argument("--weight", type=float, default=1.0, help="score-loss weight when a record has none")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_losses)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stepcritic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"stepcritic: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GatewayError as exc:
        print(f"stepcritic: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
