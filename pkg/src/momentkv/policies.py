"""Decode-cache eviction policies behind one observe/select interface.

Each policy watches one layer's head-averaged attention row per step and,
when the decode pool runs over budget, nominates the slots to drop:

* ``MomentKVPolicy``  - momentum-accumulated attention scores, evict minima.
* ``H2OPolicy``       - undecayed cumulative attention with a recency exemption.
* ``StreamingSinkPolicy`` - keep the oldest "sink" positions plus a sliding window.
* ``ScopeSlidePolicy``    - keep top instantaneous scorers plus a recency window.
* ``FullCachePolicy``     - never evicts (reference behaviour).

``ScopeSlidePolicy`` is an explicit stand-in for sliding-window-plus-
instantaneous-attention eviction; reports label it as an approximation.

Policies are pure per-layer state machines: the decode driver tells them
about appends and executed evictions so their internal score vectors stay
aligned with the pool. Identical configuration plus identical rows yields
bit-identical decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Any

import numpy as np

from .cache_core import ImportanceVector
from .errors import (
    BudgetTooSmall,
    LengthMismatch,
    NoEvictableTokens,
    NormalizationViolation,
    OverflowTooLarge,
)


class PolicyKind(str, Enum):
    MOMENT_KV = "momentkv"
    STREAMING_SINK = "streaming_sink"
    H2O = "h2o"
    SCOPE_SLIDE = "scope_slide"
    FULL_CACHE = "full_cache"


@dataclass
class PolicyConfig:
    """Declarative policy description, deserializable from run-config files.

    ``recency_window`` (h2o) defaults to one eighth of the decode budget and
    ``heavy_keep`` (scope_slide) to half of it when left unset.
    """

    kind: PolicyKind
    decode_budget: int | None = None
    momentum_alpha: float = 0.98
    sink_size: int = 4
    recency_window: int | None = None
    heavy_keep: int | None = None

    def __post_init__(self):
        self.kind = PolicyKind(self.kind)
        if not 0.0 <= self.momentum_alpha <= 1.0:
            raise ValueError(f"momentum_alpha must be in [0, 1], got {self.momentum_alpha}")
        if self.decode_budget is not None and self.decode_budget < 1:
            raise ValueError("decode_budget must be >= 1")
        if self.sink_size < 0:
            raise ValueError("sink_size must be >= 0")

    def resolved(self, decode_budget: int | None = None) -> "PolicyConfig":
        """Fill budget-dependent defaults and validate them against the budget."""
        budget = decode_budget if decode_budget is not None else self.decode_budget
        cfg = replace(self, decode_budget=budget)
        if cfg.kind is PolicyKind.FULL_CACHE:
            cfg.decode_budget = None
            return cfg
        if budget is None:
            raise ValueError(f"{cfg.kind.value} policy needs a decode budget")
        if cfg.kind is PolicyKind.H2O:
            if cfg.recency_window is None:
                cfg.recency_window = budget // 8
            if cfg.recency_window >= budget:
                raise BudgetTooSmall(
                    f"h2o recency window {cfg.recency_window} must be < budget {budget}"
                )
        if cfg.kind is PolicyKind.SCOPE_SLIDE:
            if cfg.heavy_keep is None:
                cfg.heavy_keep = budget // 2
            if cfg.heavy_keep >= budget:
                raise BudgetTooSmall(
                    f"scope_slide heavy_keep {cfg.heavy_keep} must be < budget {budget}"
                )
        return cfg

    def label(self) -> str:
        if self.kind is PolicyKind.MOMENT_KV:
            return f"momentkv(alpha={self.momentum_alpha:g})"
        if self.kind is PolicyKind.H2O:
            return f"h2o(recency={self.recency_window})"
        if self.kind is PolicyKind.STREAMING_SINK:
            return f"streaming_sink(sinks={self.sink_size})"
        if self.kind is PolicyKind.SCOPE_SLIDE:
            return f"scope_slide(heavy_keep={self.heavy_keep})"
        return "full_cache"

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "decode_budget": self.decode_budget,
            "momentum_alpha": self.momentum_alpha,
            "sink_size": self.sink_size,
            "recency_window": self.recency_window,
            "heavy_keep": self.heavy_keep,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "PolicyConfig":
        known = {"kind", "decode_budget", "momentum_alpha", "sink_size",
                 "recency_window", "heavy_keep"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown policy config fields: {sorted(unknown)}")
        if "kind" not in raw:
            raise ValueError("policy config needs a 'kind'")
        return cls(**raw)


@dataclass
class AttentionRow:
    """One step's head-averaged attention over the current full cache.

    ``weights`` covers prompt slots then decode slots, in slot order, and
    includes the token appended this step. Rows produced by a softmax sum to
    one; replay may feed unnormalized masked rows when renormalization is
    disabled, so normalization is validated at boundaries rather than here.
    """

    weights: np.ndarray
    step: int
    prefill_len: int

    def decode_slice(self) -> np.ndarray:
        return self.weights[self.prefill_len:]


def validate_attention_row(row: AttentionRow, tol: float = 1e-5) -> None:
    """Check the softmax-output invariants: nonnegative, sums to 1 +/- tol."""
    w = np.asarray(row.weights, dtype=np.float64)
    if w.ndim != 1:
        raise LengthMismatch(f"attention row must be 1-D, got shape {w.shape}")
    if row.prefill_len < 0 or row.prefill_len > w.shape[0]:
        raise LengthMismatch(
            f"prefill_len {row.prefill_len} outside row of length {w.shape[0]}"
        )
    if np.any(w < 0):
        raise NormalizationViolation(
            f"row at step {row.step}: negative weight {float(w.min())!r}"
        )
    total = float(w.sum())
    if abs(total - 1.0) > tol:
        raise NormalizationViolation(
            f"row at step {row.step}: weights sum to {total!r}, expected 1 within {tol}"
        )


@dataclass(frozen=True)
class EvictionDecision:
    """The victims chosen for one enforcement, with the scores that chose them."""

    victim_indices: tuple[int, ...]        # ascending decode-pool indices
    step: int
    scores_snapshot: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.victim_indices)


EMPTY_SNAPSHOT = np.zeros(0, dtype=np.float64)

# report annotations for policies that only approximate their namesake
POLICY_NOTES = {
    PolicyKind.SCOPE_SLIDE: (
        "scope_slide is an explicit stand-in: a sliding recency window plus "
        "instantaneous-attention keepers, not a reimplementation of any "
        "published variant"
    ),
}


def _k_smallest(scores: np.ndarray, positions: np.ndarray, k: int,
                candidates: np.ndarray) -> tuple[int, ...]:
    """Indices of the k lowest-scoring candidates; ties go to the older token."""
    cand_scores = scores[candidates]
    cand_positions = positions[candidates]
    order = np.lexsort((cand_positions, cand_scores))
    chosen = candidates[order[:k]]
    return tuple(sorted(int(i) for i in chosen))


class EvictionPolicy:
    """Shared driver protocol: on_append / observe / select / on_evict."""

    kind: PolicyKind

    def __init__(self, decode_budget: int | None):
        self.decode_budget = decode_budget
        self.prefill_len: int | None = None
        self._n_decode = 0

    # lifecycle -------------------------------------------------------------

    def on_append(self) -> None:
        self._n_decode += 1

    def observe(self, row: AttentionRow) -> None:
        self.prefill_len = row.prefill_len
        expected = row.prefill_len + self._n_decode
        if row.weights.shape[0] != expected:
            raise LengthMismatch(
                f"row of length {row.weights.shape[0]} for cache of size {expected} "
                f"(prefill {row.prefill_len} + decode {self._n_decode})"
            )
        self._update(row.decode_slice())

    def select(self, decode_positions: list[int], overflow: int,
               step: int) -> EvictionDecision:
        n = len(decode_positions)
        if n != self._n_decode:
            raise LengthMismatch(
                f"driver reports {n} decode slots, policy tracked {self._n_decode}"
            )
        if overflow < 0 or overflow > n:
            raise OverflowTooLarge(f"overflow {overflow} for decode pool of size {n}")
        if overflow == 0:
            return EvictionDecision((), step, self._snapshot())
        return self._choose(np.asarray(decode_positions, dtype=np.int64), overflow, step)

    def on_evict(self, victim_indices: tuple[int, ...]) -> None:
        self._n_decode -= len(victim_indices)
        self._prune(victim_indices)

    # hooks for subclasses --------------------------------------------------

    def _update(self, decode_weights: np.ndarray) -> None:
        pass

    def _prune(self, victim_indices: tuple[int, ...]) -> None:
        pass

    def _snapshot(self) -> np.ndarray | None:
        return None

    def _choose(self, positions: np.ndarray, overflow: int, step: int) -> EvictionDecision:
        raise NotImplementedError


class MomentKVPolicy(EvictionPolicy):
    """Momentum-accumulated attention scoring with argmin eviction.

    Every observed step folds the decode slice into the running scores as
    ``score = alpha * score + weight``; eviction removes the lowest-scoring
    slots, breaking ties toward the older position. With alpha = 0 the scores
    are exactly the latest decode slice; with alpha = 1 they match undecayed
    cumulative attention.
    """

    kind = PolicyKind.MOMENT_KV

    def __init__(self, momentum_alpha: float, decode_budget: int | None = None):
        super().__init__(decode_budget)
        self.importance = ImportanceVector(momentum_alpha)

    @property
    def momentum_alpha(self) -> float:
        return self.importance.momentum_alpha

    def on_append(self) -> None:
        super().on_append()
        self.importance.append_zero()

    def _update(self, decode_weights: np.ndarray) -> None:
        self.importance.ema_update(decode_weights)

    def _prune(self, victim_indices: tuple[int, ...]) -> None:
        self.importance.prune(victim_indices)

    def _snapshot(self) -> np.ndarray:
        return self.importance.scores.copy()

    def _choose(self, positions: np.ndarray, overflow: int, step: int) -> EvictionDecision:
        scores = self.importance.scores
        candidates = np.arange(scores.shape[0])
        victims = _k_smallest(scores, positions, overflow, candidates)
        return EvictionDecision(victims, step, scores.copy())


class H2OPolicy(EvictionPolicy):
    """Cumulative-attention scoring with the newest tokens exempt.

    Scores accumulate without decay. The most recent ``recency_window``
    decode slots can never be picked; among the rest the lowest cumulative
    scores go, ties toward the older position.
    """

    kind = PolicyKind.H2O

    def __init__(self, recency_window: int, decode_budget: int | None = None):
        super().__init__(decode_budget)
        if recency_window < 0:
            raise ValueError("recency_window must be >= 0")
        if decode_budget is not None and recency_window >= decode_budget:
            raise BudgetTooSmall(
                f"recency window {recency_window} must be < decode budget {decode_budget}"
            )
        self.recency_window = recency_window
        self.cum_scores = np.zeros(0, dtype=np.float64)

    def on_append(self) -> None:
        super().on_append()
        self.cum_scores = np.append(self.cum_scores, 0.0)

    def _update(self, decode_weights: np.ndarray) -> None:
        if decode_weights.shape[0] != self.cum_scores.shape[0]:
            raise LengthMismatch(
                f"decode slice of length {decode_weights.shape[0]} for "
                f"{self.cum_scores.shape[0]} tracked slots"
            )
        self.cum_scores += np.asarray(decode_weights, dtype=np.float64)

    def _prune(self, victim_indices: tuple[int, ...]) -> None:
        if victim_indices:
            self.cum_scores = np.delete(self.cum_scores, list(victim_indices))

    def _snapshot(self) -> np.ndarray:
        return self.cum_scores.copy()

    def _choose(self, positions: np.ndarray, overflow: int, step: int) -> EvictionDecision:
        n = self.cum_scores.shape[0]
        evictable = np.arange(max(0, n - self.recency_window))
        if overflow > evictable.shape[0]:
            raise NoEvictableTokens(
                f"need {overflow} victims but only {evictable.shape[0]} decode slots "
                f"are outside the {self.recency_window}-token recency exemption"
            )
        victims = _k_smallest(self.cum_scores, positions, overflow, evictable)
        return EvictionDecision(victims, step, self.cum_scores.copy())


class StreamingSinkPolicy(EvictionPolicy):
    """Keep the oldest global positions as sinks plus a sliding recency window.

    Prompt slots count toward the sink quota, so whenever the prompt is at
    least ``sink_size`` tokens long the decode side degenerates to a pure
    sliding window. With ``sink_size`` 0 it is a sliding window outright.
    """

    kind = PolicyKind.STREAMING_SINK

    def __init__(self, sink_size: int, decode_budget: int | None = None):
        super().__init__(decode_budget)
        if sink_size < 0:
            raise ValueError("sink_size must be >= 0")
        self.sink_size = sink_size

    def _choose(self, positions: np.ndarray, overflow: int, step: int) -> EvictionDecision:
        if self.prefill_len is None:
            raise LengthMismatch("select before any observed row")
        budget = self.decode_budget
        if budget is None:
            raise ValueError("streaming_sink needs a decode budget to size its window")
        decode_sinks = max(0, self.sink_size - self.prefill_len)
        window = budget - decode_sinks
        if window < 0:
            raise BudgetTooSmall(
                f"{decode_sinks} decode-side sinks cannot fit a budget of {budget}"
            )
        n = positions.shape[0]
        expected = max(0, n - budget)
        if overflow != expected:
            raise OverflowTooLarge(
                f"sliding policy expects overflow {expected} at size {n}, got {overflow}"
            )
        keep = set(range(decode_sinks)) | set(range(max(decode_sinks, n - window), n))
        victims = tuple(i for i in range(n) if i not in keep)
        return EvictionDecision(victims, step, EMPTY_SNAPSHOT.copy())


class ScopeSlidePolicy(EvictionPolicy):
    """Instantaneous-attention heavy keepers plus a recency window.

    Approximation of sliding-window eviction steered by the latest row: the
    newest ``budget - heavy_keep`` slots are protected, and among the older
    slots the ``heavy_keep`` highest instantaneous weights survive.
    """

    kind = PolicyKind.SCOPE_SLIDE

    def __init__(self, heavy_keep: int, decode_budget: int | None = None):
        super().__init__(decode_budget)
        if heavy_keep < 0:
            raise ValueError("heavy_keep must be >= 0")
        if decode_budget is not None and heavy_keep >= decode_budget:
            raise BudgetTooSmall(
                f"heavy_keep {heavy_keep} must be < decode budget {decode_budget}"
            )
        self.heavy_keep = heavy_keep
        self.latest = np.zeros(0, dtype=np.float64)

    def on_append(self) -> None:
        super().on_append()
        self.latest = np.append(self.latest, 0.0)

    def _update(self, decode_weights: np.ndarray) -> None:
        if decode_weights.shape[0] != self.latest.shape[0]:
            raise LengthMismatch(
                f"decode slice of length {decode_weights.shape[0]} for "
                f"{self.latest.shape[0]} tracked slots"
            )
        self.latest = np.asarray(decode_weights, dtype=np.float64).copy()

    def _prune(self, victim_indices: tuple[int, ...]) -> None:
        if victim_indices:
            self.latest = np.delete(self.latest, list(victim_indices))

    def _snapshot(self) -> np.ndarray:
        return self.latest.copy()

    def _choose(self, positions: np.ndarray, overflow: int, step: int) -> EvictionDecision:
        budget = self.decode_budget
        if budget is None:
            raise ValueError("scope_slide needs a decode budget to size its window")
        n = self.latest.shape[0]
        recent = budget - self.heavy_keep
        candidates = np.arange(max(0, n - recent))
        if overflow > candidates.shape[0]:
            raise NoEvictableTokens(
                f"need {overflow} victims but only {candidates.shape[0]} decode slots "
                f"are outside the {recent}-token recency window"
            )
        victims = _k_smallest(self.latest, positions, overflow, candidates)
        return EvictionDecision(victims, step, self.latest.copy())


class FullCachePolicy(EvictionPolicy):
    """Reference policy: observes nothing, never evicts."""

    kind = PolicyKind.FULL_CACHE

    def __init__(self, decode_budget: int | None = None):
        super().__init__(None)

    def _choose(self, positions: np.ndarray, overflow: int, step: int) -> EvictionDecision:
        raise OverflowTooLarge("full_cache policy cannot satisfy a nonzero overflow")


def make_policy(config: PolicyConfig, decode_budget: int | None = None) -> EvictionPolicy:
    """Instantiate a fresh policy for one layer from its configuration."""
    cfg = config.resolved(decode_budget)
    if cfg.kind is PolicyKind.MOMENT_KV:
        return MomentKVPolicy(cfg.momentum_alpha, cfg.decode_budget)
    if cfg.kind is PolicyKind.H2O:
        return H2OPolicy(cfg.recency_window, cfg.decode_budget)
    if cfg.kind is PolicyKind.STREAMING_SINK:
        return StreamingSinkPolicy(cfg.sink_size, cfg.decode_budget)
    if cfg.kind is PolicyKind.SCOPE_SLIDE:
        return ScopeSlidePolicy(cfg.heavy_keep, cfg.decode_budget)
    return FullCachePolicy()
