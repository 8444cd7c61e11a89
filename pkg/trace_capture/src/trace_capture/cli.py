"""trace-capture command line: capture from a model, validate a file."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .capture import CaptureConfig, capture_run
from .format import TraceFormatError, validate_attrc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace-capture",
        description="Record a causal LM's decode attention as an ATTRC01 trace",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cap = sub.add_parser("capture", help="run the model and write a trace")
    cap.add_argument("--model", required=True, help="hub id or local directory")
    cap.add_argument("--steps", type=int, required=True, help="max new tokens")
    cap.add_argument("--out", required=True, help="output trace path")
    cap.add_argument("--prompt", help="prompt text (needs the model tokenizer)")
    cap.add_argument("--prompt-file", help="file containing the prompt text")
    cap.add_argument("--prompt-ids", help="comma-separated token ids, no tokenizer needed")
    cap.add_argument("--layers", type=int, nargs="+", help="layer indices (default all)")
    cap.add_argument("--per-head", action="store_true",
                     help="store per-head rows instead of the head average")
    cap.add_argument("--sample", action="store_true",
                     help="sample instead of greedy decoding")
    cap.add_argument("--seed", type=int, default=0)
    cap.add_argument("--device", default="cpu")
    cap.set_defaults(func=cmd_capture)

    val = sub.add_parser("validate", help="re-check an existing trace file")
    val.add_argument("path")
    val.set_defaults(func=cmd_validate)
    return parser


def cmd_capture(args: argparse.Namespace) -> int:
    prompt = args.prompt
    if args.prompt_file:
        prompt = Path(args.prompt_file).read_text(encoding="utf-8")
    prompt_ids = None
    if args.prompt_ids:
        prompt_ids = [int(t) for t in args.prompt_ids.split(",") if t.strip()]
    config = CaptureConfig(
        model=args.model,
        steps=args.steps,
        out=args.out,
        prompt=prompt,
        prompt_ids=prompt_ids,
        layers=args.layers,
        head_average=not args.per_head,
        greedy=not args.sample,
        seed=args.seed,
        device=args.device,
    )
    result = capture_run(config)
    print(
        f"wrote {result.path}: prefill_len={result.prefill_len} "
        f"steps={result.steps_recorded} layers={len(result.layers)} "
        f"heads={result.n_heads}"
    )
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    summary = validate_attrc(args.path)
    print(f"{args.path}: valid trace, {summary.describe()}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TraceFormatError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
