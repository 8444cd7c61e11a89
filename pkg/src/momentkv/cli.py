"""Command-line front end: simulate, replay, gen-trace, sweep-alpha, bench.

A run is described by a JSON config file plus flag overrides. Every run
writes a ``reports/<run-id>/`` directory containing ``report.json``,
``steps.csv``, ``cdf.csv``, ``timing.csv`` and ``config.echo`` (the fully
resolved configuration, so any table can be regenerated from its echo).
Independent (policy, budget, alpha) runs can execute in a worker pool capped
by the ``MOMENTKV_THREADS`` environment variable.

Total capacity parity: the prompt pool is always kept whole, so every
configured policy retains at most prompt length + decode budget entries,
including the sink/window baselines.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import metrics, trace as trace_mod
from .attention_engine import ModelSpec, run_closed_loop
from .errors import HorizonExceedsTrace, MomentKVError, RunTooShort
from .metrics import PolicyReport, StepRecord, recency_cdf, timing_report
from .policies import POLICY_NOTES, PolicyConfig, PolicyKind, make_policy

DEFAULT_BUDGETS = [512, 1024]
DEFAULT_ALPHA = 0.98
DEFAULT_STEPS = 2048
DEFAULT_ORACLE_HORIZON = 64


# -- configuration ---------------------------------------------------------------


def load_config(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("run config must be a JSON object")
    return cfg


def resolve_config(raw: dict[str, Any], args: argparse.Namespace) -> dict[str, Any]:
    """Merge file config with flag overrides and fill every default in."""
    cfg = dict(raw)
    mode = getattr(args, "mode", None) or cfg.get("mode", "closed_loop")
    if mode not in ("closed_loop", "replay"):
        raise ValueError(f"mode must be closed_loop or replay, got {mode!r}")
    cfg["mode"] = mode
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if getattr(args, "budget", None):
        cfg["budgets"] = list(args.budget)
    cfg.setdefault("budgets", list(DEFAULT_BUDGETS))
    if getattr(args, "alpha", None):
        cfg["alpha_sweep"] = list(args.alpha)
    if getattr(args, "steps", None) is not None:
        cfg["steps"] = args.steps
    cfg.setdefault("steps", DEFAULT_STEPS)
    if getattr(args, "out", None):
        cfg["out"] = args.out
    cfg.setdefault("out", "reports")
    if getattr(args, "trace", None):
        cfg["trace"] = args.trace
    cfg.setdefault("renormalize", True)
    cfg.setdefault("oracle_horizon", DEFAULT_ORACLE_HORIZON)
    cfg.setdefault("cdf_window", metrics.RECENCY_WINDOW)

    policies = cfg.get("policies") or [
        {"kind": "full_cache"},
        {"kind": "momentkv", "momentum_alpha": DEFAULT_ALPHA},
    ]
    cfg["policies"] = [
        p.to_dict() if isinstance(p, PolicyConfig) else dict(p) for p in policies
    ]
    if not cfg["policies"]:
        raise ValueError("at least one policy must be configured")
    for budget in cfg["budgets"]:
        if int(budget) < 1:
            raise ValueError(f"decode budget must be >= 1, got {budget}")

    if mode == "closed_loop":
        model = dict(cfg.get("model") or {})
        model.setdefault("seed", cfg["seed"])
        cfg["model"] = ModelSpec(**model).to_dict()
        if "prompt_tokens" not in cfg:
            cfg.setdefault("prompt_len", 16)
    else:
        if not cfg.get("trace"):
            raise ValueError("replay mode needs a trace path")
    if getattr(args, "run_id", None):
        cfg["run_id"] = args.run_id
    cfg.setdefault("run_id", f"{mode}-s{cfg['seed']}")
    return cfg


def _worker_count() -> int:
    raw = os.environ.get("MOMENTKV_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_parallel(tasks):
    workers = _worker_count()
    if workers == 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


# -- closed-loop reporting ---------------------------------------------------------


def _prompt_tokens(cfg: dict[str, Any]) -> list[int]:
    if "prompt_tokens" in cfg:
        return [int(t) for t in cfg["prompt_tokens"]]
    rng = np.random.default_rng(cfg["seed"])
    vocab = cfg["model"]["vocab_size"]
    return rng.integers(0, vocab, int(cfg["prompt_len"])).tolist()


def closed_loop_report(
    cfg: dict[str, Any], policy_cfg: PolicyConfig, budget: int | None
) -> PolicyReport:
    """Run the toy decoder under one policy and package the step log."""
    spec = ModelSpec(**cfg["model"])
    prompt = _prompt_tokens(cfg)
    resolved = policy_cfg.resolved(budget)
    effective_budget = resolved.decode_budget
    run = run_closed_loop(
        spec,
        prompt,
        int(cfg["steps"]),
        lambda: make_policy(resolved),
        effective_budget,
    )
    report = PolicyReport(
        policy_label=resolved.label(),
        policy_kind=resolved.kind.value,
        decode_budget=effective_budget,
        prefill_len=len(prompt),
        n_steps=int(cfg["steps"]),
        n_layers=spec.n_layers,
        mode="closed_loop",
        meta={
            "model": spec.to_dict(),
            "prompt_len": len(prompt),
            "tokens_generated": len(run.tokens),
            "wall_ns": run.wall_ns,
        },
    )
    if resolved.kind in POLICY_NOTES:
        report.meta["policy_note"] = POLICY_NOTES[resolved.kind]
    m = len(prompt)
    for out in run.steps:
        for layer in range(spec.n_layers):
            row = out.attention_rows[layer]
            victims = out.decisions[layer].victim_indices
            keep = [
                i for i in range(row.weights.shape[0])
                if i < m or (i - m) not in set(victims)
            ] if victims else range(row.weights.shape[0])
            retained = metrics.retained_mass(row.weights, list(keep))
            pre = out.pre_enforce_sizes[layer]
            report.records.append(
                StepRecord(
                    layer=layer,
                    step=out.step,
                    pre_enforce_size=pre,
                    cache_total=pre - len(victims),
                    decode_size=pre - m - len(victims),
                    evicted_positions=out.evicted_positions[layer],
                    retained_mass=retained,
                    policy_ns=out.policy_ns[layer],
                    step_ns=out.step_ns if layer == 0 else 0,
                )
            )
    report.final_decode_positions = [pool.decode_positions() for pool in run.pools]
    return report


# -- report files ------------------------------------------------------------------


def _write_steps_csv(path: Path, reports: Sequence[PolicyReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["policy", "budget", "layer", "step", "pre_enforce_size", "cache_total",
             "decode_size", "n_evicted", "evicted_positions", "retained_mass",
             "policy_ns", "step_ns"]
        )
        for rep in reports:
            for r in rep.records:
                writer.writerow(
                    [rep.policy_label, rep.decode_budget, r.layer, r.step,
                     r.pre_enforce_size, r.cache_total, r.decode_size,
                     len(r.evicted_positions),
                     " ".join(map(str, r.evicted_positions)),
                     f"{r.retained_mass:.9f}", r.policy_ns, r.step_ns]
                )


def _write_cdf_csv(path: Path, cdf_rows: list[dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "group", "fraction", "cdf", "diagonal"])
        for row in cdf_rows:
            writer.writerow(
                [row.get("source", ""), row["group"], f"{row['fraction']:.6f}",
                 f"{row['cdf']:.9f}", f"{row['diagonal']:.9f}"]
            )


def _write_timing_csv(path: Path, report) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["policy", "budget", "median_policy_us", "mean_policy_us",
             "mean_step_us", "policy_share"]
        )
        for e in report.entries:
            d = e.to_dict()
            writer.writerow(
                [d["policy"], d["decode_budget"], f"{d['median_policy_us']:.3f}",
                 f"{d['mean_policy_us']:.3f}", f"{d['mean_step_us']:.3f}",
                 f"{d['policy_share']:.6f}"]
            )
        for policy, ratio in report.scaling_ratios.items():
            writer.writerow([policy, "scaling_ratio_max_vs_min", f"{ratio:.4f}", "", "", ""])


def write_run_outputs(
    cfg: dict[str, Any],
    reports: Sequence[PolicyReport],
    cdf_rows: list[dict[str, Any]],
    extra: dict[str, Any] | None = None,
) -> Path:
    outdir = Path(cfg["out"]) / cfg["run_id"]
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "config.echo", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    timing = timing_report(reports)
    payload = {
        "run_id": cfg["run_id"],
        "mode": cfg["mode"],
        "reports": [rep.to_dict(include_steps=False) for rep in reports],
        "timing": [e.to_dict() for e in timing.entries],
        "scaling_ratios": timing.scaling_ratios,
    }
    if extra:
        payload.update(extra)
    with open(outdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_steps_csv(outdir / "steps.csv", reports)
    _write_cdf_csv(outdir / "cdf.csv", cdf_rows)
    _write_timing_csv(outdir / "timing.csv", timing)
    return outdir


def _collect_cdf_rows(cfg: dict[str, Any], trace_file) -> list[dict[str, Any]]:
    """Concentration curves from an uncompressed attention source, if usable."""
    window = int(cfg["cdf_window"])
    rows: list[dict[str, Any]] = []
    if trace_file is None:
        return rows
    try:
        report = recency_cdf(trace_file, window)
    except RunTooShort:
        return rows
    for row in report.to_rows():
        row["source"] = trace_file.header.source.name.lower()
        rows.append(row)
    return rows


# -- subcommand bodies ----------------------------------------------------------------


def _policy_budget_pairs(cfg: dict[str, Any]) -> list[tuple[PolicyConfig, int | None]]:
    pairs = []
    for raw in cfg["policies"]:
        policy = PolicyConfig.from_dict(raw)
        if policy.kind is PolicyKind.FULL_CACHE:
            pairs.append((policy, None))
        else:
            for budget in cfg["budgets"]:
                pairs.append((policy, int(budget)))
    return pairs


def run_simulate(cfg: dict[str, Any]) -> tuple[Path, list[PolicyReport]]:
    pairs = _policy_budget_pairs(cfg)
    if cfg["mode"] == "replay":
        trace_file = trace_mod.read_trace(cfg["trace"])
        tasks = [
            (lambda p=p, b=b: trace_mod.replay(
                trace_file, p.resolved(b), renormalize=cfg["renormalize"]))
            for p, b in pairs
        ]
        reports = _run_parallel(tasks)
        _attach_replay_aggregates(cfg, reports, trace_file)
        cdf_rows = _collect_cdf_rows(cfg, trace_file)
    else:
        tasks = [(lambda p=p, b=b: closed_loop_report(cfg, p, b)) for p, b in pairs]
        reports = _run_parallel(tasks)
        cdf_rows = _closed_loop_cdf_rows(cfg)
    outdir = write_run_outputs(cfg, reports, cdf_rows)
    return outdir, reports


def _attach_replay_aggregates(cfg, reports: Sequence[PolicyReport], trace_file) -> None:
    """Fill in trace-dependent aggregates where the trace supports them."""
    hitters = metrics.trace_hitter_positions(trace_file)
    horizon = int(cfg["oracle_horizon"])
    for rep in reports:
        if hitters:
            rep.meta["heavy_hitter_retention"] = metrics.hitter_retention(rep, hitters)
        try:
            agreement = metrics.eviction_oracle_agreement(rep, trace_file, horizon)
        except HorizonExceedsTrace:
            continue
        if not np.isnan(agreement):
            rep.meta["oracle_agreement"] = agreement
            rep.meta["oracle_horizon"] = horizon


def _closed_loop_cdf_rows(cfg: dict[str, Any]) -> list[dict[str, Any]]:
    if int(cfg["steps"]) < int(cfg["cdf_window"]):
        return []
    spec = ModelSpec(**cfg["model"])
    run = run_closed_loop(
        spec, _prompt_tokens(cfg), int(cfg["steps"]),
        lambda: make_policy(PolicyConfig(kind=PolicyKind.FULL_CACHE)), None,
    )
    exported = trace_mod.trace_from_closed_loop(run)
    return _collect_cdf_rows(cfg, exported)


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = resolve_config(load_config(args.config), args)
    outdir, reports = run_simulate(cfg)
    for rep in reports:
        print(
            f"{rep.policy_label} budget={rep.decode_budget}: "
            f"mean retained mass {rep.mean_retained_mass():.4f}, "
            f"max cache {rep.max_total_size()}"
        )
    print(f"reports written to {outdir}")
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    if args.kind == "heavy-hitter":
        hitters = [_parse_pair(h) for h in args.hitter or []]
        dips = [_parse_triple(d) for d in args.dip or []]
        tf = trace_mod.gen_heavy_hitter_trace(
            prefill_len=args.prefill_len,
            steps=args.steps,
            hitters=hitters,
            dips=dips,
            seed=args.seed or 0,
            n_layers=args.layers,
            position_noise=args.position_noise,
            step_noise=args.step_noise,
            dip_level=args.dip_level,
            self_weight=args.self_weight,
        )
    else:
        tf = trace_mod.gen_recency_burst_trace(
            prefill_len=args.prefill_len,
            steps=args.steps,
            concentration=args.concentration,
            seed=args.seed or 0,
            n_layers=args.layers,
        )
    trace_mod.write_trace(tf, args.out)
    h = tf.header
    print(
        f"wrote {args.out}: prefill_len={h.prefill_len} steps={h.n_steps} "
        f"layers={h.n_layers} heads={h.n_heads} source={h.source.name.lower()}"
    )
    return 0


def _parse_pair(text: str) -> tuple[int, float]:
    pos, mass = text.split(":")
    return int(pos), float(mass)


def _parse_triple(text: str) -> tuple[int, int, int]:
    pos, start, length = text.split(":")
    return int(pos), int(start), int(length)


def cmd_sweep_alpha(args: argparse.Namespace) -> int:
    cfg = resolve_config(load_config(args.config), args)
    alphas = cfg.get("alpha_sweep")
    if not alphas:
        raise ValueError("sweep-alpha needs --alpha values or alpha_sweep in the config")
    base = None
    for raw in cfg["policies"]:
        policy = PolicyConfig.from_dict(raw)
        if policy.kind is PolicyKind.MOMENT_KV:
            base = policy
            break
    if base is None:
        raise ValueError("sweep-alpha needs a momentkv policy in the config")

    trace_file = None
    hitters: list[int] = []
    if cfg["mode"] == "replay":
        trace_file = trace_mod.read_trace(cfg["trace"])
        hitters = metrics.trace_hitter_positions(trace_file)

    rows = []
    reports = []
    for alpha in alphas:
        for budget in cfg["budgets"]:
            policy = PolicyConfig(
                kind=PolicyKind.MOMENT_KV, momentum_alpha=float(alpha)
            ).resolved(int(budget))
            if trace_file is not None:
                rep = trace_mod.replay(trace_file, policy, renormalize=cfg["renormalize"])
            else:
                rep = closed_loop_report(cfg, policy, int(budget))
            reports.append(rep)
            retention = (
                metrics.hitter_retention(rep, hitters) if hitters else float("nan")
            )
            agreement = float("nan")
            if trace_file is not None:
                try:
                    agreement = metrics.eviction_oracle_agreement(
                        rep, trace_file, int(cfg["oracle_horizon"])
                    )
                except HorizonExceedsTrace:
                    pass
            rows.append(
                {
                    "alpha": float(alpha),
                    "budget": int(budget),
                    "mean_retained_mass": rep.mean_retained_mass(),
                    "hitter_retention": retention,
                    "oracle_agreement": agreement,
                    "h2o_equivalent": float(alpha) == 1.0,
                }
            )

    outdir = Path(cfg["out"]) / cfg["run_id"]
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["alpha", "budget", "mean_retained_mass",
                            "hitter_retention", "oracle_agreement", "h2o_equivalent"]
        )
        writer.writeheader()
        writer.writerows(rows)
    with open(outdir / "config.echo", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in rows:
        flag = "  [h2o-equivalent]" if row["h2o_equivalent"] else ""
        print(
            f"alpha={row['alpha']:<6g} budget={row['budget']:<6d} "
            f"retained={row['mean_retained_mass']:.4f} "
            f"hitter_retention={row['hitter_retention']:.3f} "
            f"oracle_agreement={row['oracle_agreement']:.3f}{flag}"
        )
    print(f"sweep written to {outdir / 'sweep.csv'}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = resolve_config(load_config(args.config), args)
    if cfg["mode"] != "closed_loop":
        raise ValueError("bench requires a closed_loop config")
    outdir, reports = run_simulate(cfg)
    timing = timing_report(reports)
    full = [e for e in timing.entries if e.policy == "full_cache"]
    baseline = full[0].median_policy_ns if full else None
    print(f"{'policy':<28} {'budget':>8} {'median us':>10} {'share':>8} {'vs full':>8}")
    for e in timing.entries:
        rel = f"{e.median_policy_ns / baseline:.2f}x" if baseline else "-"
        print(
            f"{e.policy:<28} {str(e.decode_budget):>8} "
            f"{e.median_policy_ns / 1e3:>10.2f} {e.policy_share:>8.4f} {rel:>8}"
        )
    for policy, ratio in timing.scaling_ratios.items():
        print(f"scaling ratio (max/min budget) {policy}: {ratio:.2f}x")
    print(f"timing table written to {outdir / 'timing.csv'}")
    return 0


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentkv",
        description="KV-cache eviction simulator: momentum scoring vs baselines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, mode: str | None = None) -> None:
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (default: reports)")
        p.add_argument("--seed", type=int)
        p.add_argument("--budget", type=int, action="append",
                       help="decode budget, repeatable")
        p.add_argument("--alpha", type=float, action="append",
                       help="momentum factor, repeatable")
        p.add_argument("--steps", type=int)
        p.add_argument("--run-id", dest="run_id")
        if mode is None:
            p.add_argument("--mode", choices=["closed_loop", "replay"])
            p.add_argument("--trace", help="trace file for replay mode")
        else:
            p.set_defaults(mode=mode)
            p.add_argument("--trace", help="trace file for replay mode")

    sim = sub.add_parser("simulate", help="run policies closed-loop or over a trace")
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    rep = sub.add_parser("replay", help="simulate --mode replay")
    common(rep, mode="replay")
    rep.set_defaults(func=cmd_simulate)

    gen = sub.add_parser("gen-trace", help="generate a synthetic attention trace")
    gen.add_argument("--kind", choices=["heavy-hitter", "recency-burst"],
                     required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--prefill-len", type=int, default=8)
    gen.add_argument("--steps", type=int, default=512)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--layers", type=int, default=1)
    gen.add_argument("--hitter", action="append",
                     help="POSITION:MASS, repeatable (heavy-hitter)")
    gen.add_argument("--dip", action="append",
                     help="POSITION:START_STEP:LENGTH, repeatable (heavy-hitter)")
    gen.add_argument("--position-noise", type=float, default=0.1)
    gen.add_argument("--step-noise", type=float, default=0.05)
    gen.add_argument("--dip-level", type=float, default=0.5)
    gen.add_argument("--self-weight", type=float, default=0.0)
    gen.add_argument("--concentration", type=float, default=0.1,
                     help="top fraction of the window (recency-burst)")
    gen.set_defaults(func=cmd_gen_trace)

    swp = sub.add_parser("sweep-alpha", help="momentum factor sensitivity sweep")
    common(swp)
    swp.set_defaults(func=cmd_sweep_alpha)

    ben = sub.add_parser("bench", help="closed-loop timing comparison")
    common(ben)
    ben.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MomentKVError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
