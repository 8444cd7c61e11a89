"""Run-level metrics: retained attention mass, recency-window concentration
curves, hindsight-oracle agreement, heavy-hitter retention, and timing.

Everything here is a pure function over finished run data (a
:class:`PolicyReport` and/or an uncompressed trace), so metric passes can be
run repeatedly or in parallel without touching simulation state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import HorizonExceedsTrace, RunTooShort

RECENCY_WINDOW = 256  # fixed window for concentration curves


@dataclass
class StepRecord:
    """One (layer, step) observation of the simulation loop."""

    layer: int
    step: int
    pre_enforce_size: int
    cache_total: int
    decode_size: int
    evicted_positions: tuple[int, ...]
    retained_mass: float
    policy_ns: int = 0
    step_ns: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "step": self.step,
            "pre_enforce_size": self.pre_enforce_size,
            "cache_total": self.cache_total,
            "decode_size": self.decode_size,
            "evicted_positions": list(self.evicted_positions),
            "retained_mass": self.retained_mass,
            "policy_ns": self.policy_ns,
            "step_ns": self.step_ns,
        }


@dataclass
class PolicyReport:
    """Everything one (policy, budget) run produced.

    ``final_decode_positions`` holds, per layer, the global positions still
    cached when the run ended; together with the per-step eviction log this
    fully determines which original tokens survived.
    """

    policy_label: str
    policy_kind: str
    decode_budget: int | None
    prefill_len: int
    n_steps: int
    n_layers: int
    mode: str
    records: list[StepRecord] = field(default_factory=list)
    final_decode_positions: list[list[int]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def layer_records(self, layer: int) -> list[StepRecord]:
        return [r for r in self.records if r.layer == layer]

    def mean_retained_mass(self) -> float:
        if not self.records:
            return float("nan")
        return float(np.mean([r.retained_mass for r in self.records]))

    def min_retained_mass(self) -> float:
        if not self.records:
            return float("nan")
        return float(np.min([r.retained_mass for r in self.records]))

    def eviction_events(self, layer: int) -> list[tuple[int, tuple[int, ...]]]:
        """(step, victim global positions) for every nonempty eviction."""
        return [
            (r.step, r.evicted_positions)
            for r in self.layer_records(layer)
            if r.evicted_positions
        ]

    def max_total_size(self) -> int:
        return max((r.cache_total for r in self.records), default=0)

    def policy_cost_ns(self) -> np.ndarray:
        return np.array([r.policy_ns for r in self.records], dtype=np.int64)

    def step_cost_ns(self) -> np.ndarray:
        return np.array([r.step_ns for r in self.records], dtype=np.int64)

    def to_dict(self, include_steps: bool = True) -> dict[str, Any]:
        out = {
            "policy": self.policy_label,
            "policy_kind": self.policy_kind,
            "decode_budget": self.decode_budget,
            "prefill_len": self.prefill_len,
            "n_steps": self.n_steps,
            "n_layers": self.n_layers,
            "mode": self.mode,
            "mean_retained_mass": self.mean_retained_mass(),
            "min_retained_mass": self.min_retained_mass(),
            "max_total_size": self.max_total_size(),
            "final_decode_positions": self.final_decode_positions,
            "meta": self.meta,
        }
        if include_steps:
            out["steps"] = [r.to_dict() for r in self.records]
        return out


def retained_mass(weights: np.ndarray, keep_indices: Sequence[int]) -> float:
    """Fraction of an attention row's mass that lands on the kept slots.

    Normalized by the row's own total, so keeping everything is exactly 1.0
    regardless of float32 softmax rounding.
    """
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0:
        return 0.0
    idx = np.asarray(list(keep_indices), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= w.shape[0]:
        raise IndexError("keep index outside the attention row")
    return float(w[idx].sum()) / total


# -- recency concentration ----------------------------------------------------


@dataclass
class CdfReport:
    """Sorted cumulative attention-share curves over the recency window."""

    window: int
    fractions: np.ndarray                 # (window,) token-fraction grid
    curves: dict[str, np.ndarray]         # group name -> (window,) CDF
    diagonal: np.ndarray                  # uniform baseline
    measured_steps: int

    def to_rows(self) -> list[dict[str, Any]]:
        rows = []
        for group, curve in self.curves.items():
            for frac, cdf, diag in zip(self.fractions, curve, self.diagonal):
                rows.append(
                    {"group": group, "fraction": float(frac),
                     "cdf": float(cdf), "diagonal": float(diag)}
                )
        return rows


def _layer_groups(n_layers: int) -> dict[str, list[int]]:
    chunks = np.array_split(np.arange(n_layers), 3)
    names = ("early", "middle", "late")
    return {name: list(map(int, chunk)) for name, chunk in zip(names, chunks) if len(chunk)}


def recency_cdf(trace, window: int = RECENCY_WINDOW) -> CdfReport:
    """Concentration of attention over the most recent decode tokens.

    For every step whose decode history fills the window, take the last
    ``window`` decode weights, sort them descending, and accumulate their
    share of the window's mass. Curves are averaged per layer group (early,
    middle, late thirds of the stack).
    """
    header = trace.header
    if header.n_steps < window:
        raise RunTooShort(
            f"need at least {window} decode steps for one measurement, "
            f"run has {header.n_steps}"
        )
    groups = _layer_groups(header.n_layers)
    m = header.prefill_len
    sums: dict[str, np.ndarray] = {g: np.zeros(window, dtype=np.float64) for g in groups}
    counts: dict[str, int] = {g: 0 for g in groups}
    measured = 0
    for ts in trace.steps:
        t = ts.step
        if t < window:
            continue
        measured += 1
        for group, layers in groups.items():
            for layer in layers:
                row = ts.averaged(layer)
                tail = np.asarray(row[m + t - window : m + t], dtype=np.float64)
                order = np.sort(tail)[::-1]
                total = order.sum()
                if total <= 0:
                    continue
                sums[group] += np.cumsum(order) / total
                counts[group] += 1
    fractions = np.arange(1, window + 1, dtype=np.float64) / window
    curves = {
        g: (sums[g] / counts[g]) if counts[g] else np.full(window, np.nan)
        for g in groups
    }
    return CdfReport(window, fractions, curves, fractions.copy(), measured)


# -- heavy-hitter bookkeeping ---------------------------------------------------


def trace_hitter_positions(trace) -> list[int]:
    """Hitter positions recorded in a generated trace's tag, if any."""
    try:
        tag = json.loads(trace.header.model_tag)
    except (ValueError, TypeError):
        return []
    hitters = tag.get("hitters") if isinstance(tag, dict) else None
    if not hitters:
        return []
    return [int(h[0]) for h in hitters]


def hitter_retention(report: PolicyReport, hitter_positions: Sequence[int]) -> float:
    """Fraction of labeled hitter tokens still cached when the run ended.

    Prompt-position hitters are always alive (the prompt pool is frozen);
    decode-position hitters count only if present in every layer's final
    survivor set.
    """
    if not hitter_positions:
        return float("nan")
    alive = 0
    for pos in hitter_positions:
        if pos < report.prefill_len:
            alive += 1
        elif all(pos in survivors for survivors in report.final_decode_positions):
            alive += 1
    return alive / len(hitter_positions)


# -- hindsight oracle ------------------------------------------------------------


def _future_mass(trace, layer: int, positions: np.ndarray, t: int, horizon: int) -> np.ndarray:
    total = np.zeros(positions.shape[0], dtype=np.float64)
    for s in range(t + 1, t + horizon + 1):
        row = trace.steps[s - 1].averaged(layer)
        total += np.asarray(row, dtype=np.float64)[positions]
    return total


def eviction_oracle_agreement(report: PolicyReport, trace, horizon: int = 64) -> float:
    """Mean Jaccard overlap between policy victims and hindsight-best victims.

    For each eviction at step t the hindsight oracle picks, among the decode
    tokens cached at decision time, the same number of victims with the least
    total attention mass over the next ``horizon`` uncompressed trace steps
    (ties to the older position). Only events with the full horizon ahead of
    them (t + horizon <= total steps) are scored. A run with no evictions at
    all (full cache) has nothing to agree on and reports NaN rather than a
    flattering 1.0.
    """
    n_steps = trace.header.n_steps
    if horizon < 1 or horizon >= n_steps:
        raise HorizonExceedsTrace(
            f"horizon {horizon} cannot be covered by a {n_steps}-step trace"
        )
    m = report.prefill_len
    overlaps: list[float] = []
    total_events = 0
    for layer in range(report.n_layers):
        events = dict(report.eviction_events(layer))
        total_events += len(events)
        live: list[int] = []
        for t in range(1, n_steps + 1):
            live.append(m + t - 1)
            victims = events.get(t)
            if victims:
                if t + horizon <= n_steps:
                    candidates = np.array(live, dtype=np.int64)
                    future = _future_mass(trace, layer, candidates, t, horizon)
                    order = np.lexsort((candidates, future))
                    oracle = set(candidates[order[: len(victims)]].tolist())
                    chosen = set(victims)
                    overlaps.append(len(oracle & chosen) / len(oracle | chosen))
                live = [p for p in live if p not in set(victims)]
    if total_events == 0:
        return float("nan")
    if not overlaps:
        raise HorizonExceedsTrace(
            f"no eviction event leaves {horizon} trace steps for the oracle"
        )
    return float(np.mean(overlaps))


# -- timing ----------------------------------------------------------------------


@dataclass
class TimingEntry:
    policy: str
    decode_budget: int | None
    median_policy_ns: float
    mean_policy_ns: float
    mean_step_ns: float
    policy_share: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "policy": self.policy,
            "decode_budget": self.decode_budget,
            "median_policy_us": self.median_policy_ns / 1e3,
            "mean_policy_us": self.mean_policy_ns / 1e3,
            "mean_step_us": self.mean_step_ns / 1e3,
            "policy_share": self.policy_share,
        }


@dataclass
class TimingReport:
    entries: list[TimingEntry]
    scaling_ratios: dict[str, float]  # policy -> cost(max budget)/cost(min budget)

    def entry(self, policy: str, budget: int | None) -> TimingEntry | None:
        for e in self.entries:
            if e.policy == policy and e.decode_budget == budget:
                return e
        return None


def timing_report(reports: Sequence[PolicyReport]) -> TimingReport:
    """Summarize per-step policy cost and its budget scaling across runs."""
    entries = []
    by_policy: dict[str, dict[int, float]] = {}
    for rep in reports:
        policy_ns = rep.policy_cost_ns()
        step_ns = rep.step_cost_ns()
        if policy_ns.size == 0:
            continue
        median = float(np.median(policy_ns))
        mean = float(policy_ns.mean())
        mean_step = float(step_ns.mean()) if step_ns.size else 0.0
        share = float(policy_ns.sum() / step_ns.sum()) if step_ns.sum() > 0 else 0.0
        entries.append(
            TimingEntry(rep.policy_label, rep.decode_budget, median, mean, mean_step, share)
        )
        if rep.decode_budget is not None:
            by_policy.setdefault(rep.policy_label, {})[rep.decode_budget] = median
    ratios = {}
    for policy, budgets in by_policy.items():
        if len(budgets) >= 2:
            lo, hi = min(budgets), max(budgets)
            if budgets[lo] > 0:
                ratios[policy] = budgets[hi] / budgets[lo]
    return TimingReport(entries, ratios)


def measure_policy_cost(
    policy_factory,
    decode_budget: int,
    n_steps: int = 512,
    prefill_len: int = 8,
    seed: int = 0,
    warmup: int = 64,
) -> dict[str, float]:
    """Microbenchmark one policy's per-step cost at a steady-state pool size.

    Synthetic normalized rows drive the policy through the full append,
    observe, select, evict protocol. The decode pool is first filled to the
    budget, a warmup follows, and only then are the ``n_steps`` steady-state
    samples taken, which is where per-step cost is largest and the budget
    scaling contract is measured.
    """
    from .policies import AttentionRow  # local import to avoid cycle at module load

    rng = np.random.default_rng(seed)
    policy = policy_factory()
    positions: list[int] = []
    samples: list[int] = []
    total = decode_budget + warmup + n_steps
    for t in range(1, total + 1):
        positions.append(prefill_len + t - 1)
        n = prefill_len + len(positions)
        weights = rng.random(n).astype(np.float64) + 1e-3
        weights /= weights.sum()
        row = AttentionRow(weights, t, prefill_len)
        budget = policy.decode_budget
        overflow = 0 if budget is None else max(0, len(positions) - budget)
        t0 = time.perf_counter_ns()
        policy.on_append()
        policy.observe(row)
        decision = policy.select(positions, overflow, t)
        policy.on_evict(decision.victim_indices)
        elapsed = time.perf_counter_ns() - t0
        if decision.victim_indices:
            victim_set = set(decision.victim_indices)
            positions = [p for i, p in enumerate(positions) if i not in victim_set]
        if t > decode_budget + warmup:
            samples.append(elapsed)
    arr = np.array(samples, dtype=np.float64)
    return {
        "median_ns": float(np.median(arr)),
        "mean_ns": float(arr.mean()),
        "p90_ns": float(np.percentile(arr, 90)),
        "samples": float(arr.size),
    }
