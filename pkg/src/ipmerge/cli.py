"""Command-line front end: merge, analyze and verify subcommands.

Exit codes: 0 success, 1 verification/numerical failure, 2 usage error,
3 I/O or format error.  IPMERGE_THREADS overrides --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import (
    AlignmentError,
    AlignmentSpec,
    CheckpointFormatError,
    align_layers,
    load_checkpoint,
    save_checkpoint,
)
from .engines import (
    MergeError,
    MergeRecipe,
    MergeReport,
    merge_checkpoints,
    verify_merge,
)
from .linalg import NonFiniteError
from .report import analyze_triples
from .subspace import SelectionConfig

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3

_METHOD_ALIASES = {"ip": "ip", "ta": "task_arithmetic", "ties": "ties", "emr": "emr"}


def _resolve_threads(requested: int | None, deterministic: bool) -> int:
    if deterministic:
        return 1
    env = os.environ.get("IPMERGE_THREADS")
    if env is not None:
        return max(1, int(env))
    if requested is not None:
        return max(1, requested)
    return os.cpu_count() or 1


def _load_inputs(args):
    base = load_checkpoint(args.base)
    mllm = load_checkpoint(args.mllm)
    donors = [load_checkpoint(p) for p in args.llm]
    spec = AlignmentSpec.from_json(args.align_spec) if args.align_spec else AlignmentSpec()
    triples = align_layers(base, mllm, donors, spec)
    return base, mllm, donors, triples


def cmd_merge(args: argparse.Namespace) -> int:
    base, mllm, donors, triples = _load_inputs(args)
    recipe = MergeRecipe(
        method=_METHOD_ALIASES[args.method],
        selection=SelectionConfig(
            threshold=args.threshold,
            gamma_mode=args.gamma_mode,
            rank_limit=args.rank,
        ),
        alphas=args.alpha if args.alpha else [1.0] * len(donors),
        ties_retain_fraction=args.retain,
        dtype_policy=args.dtype_policy,
        threads=_resolve_threads(args.threads, args.deterministic),
    )
    merged, report = merge_checkpoints(base, mllm, donors, triples, recipe)
    try:
        save_checkpoint(merged, args.out, recipe.dtype_policy)
        if args.report:
            report.save(args.report)
    except Exception:
        for path in (args.out, args.report):
            if path and os.path.exists(path):
                os.remove(path)
        raise
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    _, _, _, triples = _load_inputs(args)
    cfg = SelectionConfig(
        threshold=args.threshold,
        gamma_mode=args.gamma_mode,
        rank_limit=args.rank,
    )
    report = analyze_triples(
        triples, cfg, top_k=args.top_k, trace_metric=args.trace_metric
    )
    csv_path = args.out
    json_path = os.path.splitext(csv_path)[0] + ".json"
    report.save_csv(csv_path)
    report.save_json(json_path)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    merged = load_checkpoint(args.merged)
    mllm = load_checkpoint(args.mllm)
    report = MergeReport.load(args.report)
    summary = verify_merge(merged, report, mllm)
    print(json.dumps(summary.to_dict(), indent=2))
    if not summary.passed:
        failed = [c["name"] for c in summary.checks if not c["passed"]]
        print(f"error: verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipmerge")
    sub = parser.add_subparsers(dest="command", required=True)

    merge = sub.add_parser("merge", help="merge checkpoints and write the result")
    merge.add_argument("--method", choices=sorted(_METHOD_ALIASES), required=True)
    merge.add_argument("--base", required=True)
    merge.add_argument("--mllm", required=True)
    merge.add_argument("--llm", action="append", required=True)
    merge.add_argument("--out", required=True)
    merge.add_argument("--threshold", type=float, default=0.3)
    merge.add_argument(
        "--gamma-mode",
        choices=["softmax_raw", "softmax_maxnorm", "uniform_ones"],
        default="softmax_maxnorm",
    )
    merge.add_argument("--rank", type=int, default=None)
    merge.add_argument("--alpha", type=float, action="append")
    merge.add_argument("--retain", type=float, default=0.2)
    merge.add_argument("--align-spec", default=None)
    merge.add_argument("--report", default=None)
    merge.add_argument("--threads", type=int, default=None)
    merge.add_argument("--deterministic", action="store_true")
    merge.add_argument(
        "--dtype-policy",
        choices=["preserve", "force_f32", "force_f16", "force_bf16"],
        default="preserve",
    )
    merge.set_defaults(func=cmd_merge)

    analyze = sub.add_parser("analyze", help="emit per-layer diagnostics as CSV + JSON")
    analyze.add_argument("--base", required=True)
    analyze.add_argument("--mllm", required=True)
    analyze.add_argument("--llm", action="append", required=True)
    analyze.add_argument("--out", required=True, help="CSV output path; JSON written beside it")
    analyze.add_argument("--top-k", type=int, default=100)
    analyze.add_argument("--threshold", type=float, default=0.3)
    analyze.add_argument(
        "--gamma-mode",
        choices=["softmax_raw", "softmax_maxnorm", "uniform_ones"],
        default="softmax_maxnorm",
    )
    analyze.add_argument("--rank", type=int, default=None)
    analyze.add_argument(
        "--trace-metric", choices=["frobenius_sq", "nuclear"], default="frobenius_sq"
    )
    analyze.add_argument("--align-spec", default=None)
    analyze.set_defaults(func=cmd_analyze)

    verify = sub.add_parser("verify", help="re-check a finished merge")
    verify.add_argument("--merged", required=True)
    verify.add_argument("--mllm", required=True)
    verify.add_argument("--report", required=True)
    verify.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CheckpointFormatError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MergeError, AlignmentError, NonFiniteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
