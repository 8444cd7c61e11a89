"""Two-pool KV cache bookkeeping.

A generation owns one :class:`CachePool` per transformer layer: a frozen
prompt pool written once during prefill, and a decode pool that grows by one
slot per generated token and is trimmed back to its budget after each step.
Policies decide *which* decode slots go; this module executes the removal and
keeps the per-slot momentum scores index-aligned with the decode list.

Each pool has a single writer, its layer's decode loop; different layers may
advance concurrently. Metric snapshots must be taken between steps, never
while a step is mutating the pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlreadyPrefilled,
    DimensionMismatch,
    EmptyPrompt,
    IndexOutOfRange,
    NotPrefilled,
)


class Phase(Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class TokenSlot:
    """One cached token: its immutable global position plus per-head K/V.

    ``global_position`` is the 0-based step index of the token within the
    full sequence (prompt tokens occupy 0..M-1, the token generated at decode
    step t occupies M+t-1). It never changes, even after neighbours are
    evicted, so reports can say which original tokens survived.
    """

    global_position: int
    keys: np.ndarray      # (n_heads, d_head)
    values: np.ndarray    # (n_heads, d_head)
    phase: Phase

    @classmethod
    def marker(cls, global_position: int, phase: Phase) -> "TokenSlot":
        """Bookkeeping-only slot for trace replay, where K/V content is unused."""
        z = np.zeros((1, 1), dtype=np.float32)
        return cls(global_position, z, z, phase)


class ImportanceVector:
    """Momentum scores for the decode pool, one entry per live decode slot.

    Scores are kept in float64 regardless of the model precision so the
    exponential accumulation stays stable over very long generations. A
    freshly appended slot always starts at exactly zero; its first observed
    attention weight becomes its first score.
    """

    def __init__(self, momentum_alpha: float):
        if not 0.0 <= momentum_alpha <= 1.0:
            raise ValueError(f"momentum_alpha must be in [0, 1], got {momentum_alpha}")
        self.momentum_alpha = float(momentum_alpha)
        self.scores = np.zeros(0, dtype=np.float64)

    def __len__(self) -> int:
        return self.scores.shape[0]

    def append_zero(self) -> None:
        self.scores = np.append(self.scores, 0.0)

    def ema_update(self, decode_weights: np.ndarray) -> None:
        """Fold one step's decode-slice attention into the running scores."""
        w = np.asarray(decode_weights, dtype=np.float64)
        if w.shape[0] != len(self):
            raise ValueError(
                f"weight vector of length {w.shape[0]} for {len(self)} decode slots"
            )
        self.scores = self.momentum_alpha * self.scores + w

    def prune(self, indices: Sequence[int]) -> None:
        if len(indices):
            self.scores = np.delete(self.scores, list(indices))

    def copy(self) -> "ImportanceVector":
        dup = ImportanceVector(self.momentum_alpha)
        dup.scores = self.scores.copy()
        return dup


class CachePool:
    """Frozen prompt slots plus a budget-bounded decode list.

    The decode list may transiently hold ``decode_budget + 1`` slots between
    the append and the enforcement of a step, because scoring happens after
    the new token's attention is computed. Enforcement (eviction) is driven
    externally by a policy; this class only checks and executes it.
    """

    def __init__(self, decode_budget: int | None = None):
        if decode_budget is not None and decode_budget < 1:
            raise ValueError(f"decode_budget must be >= 1, got {decode_budget}")
        self.decode_budget = decode_budget
        self.prefill: list[TokenSlot] = []
        self.decode: list[TokenSlot] = []
        self._head_shape: tuple[int, int] | None = None
        self._prefill_done = False
        # contiguous K/V mirrors of [prefill | decode] so attention reads a
        # slice instead of restacking per step; grown by doubling, compacted
        # in place on eviction
        self._kbuf: np.ndarray | None = None
        self._vbuf: np.ndarray | None = None

    # -- prefill ------------------------------------------------------------

    @property
    def prefill_len(self) -> int:
        return len(self.prefill)

    def append_prefill(self, slots: Sequence[TokenSlot]) -> None:
        """Write the prompt slots. Exactly once per generation, in order."""
        if self._prefill_done:
            raise AlreadyPrefilled("prompt slots were already written to this pool")
        if not slots:
            raise EmptyPrompt("cannot prefill from an empty prompt")
        prior_shape = self._head_shape
        try:
            for slot in slots:
                if slot.phase is not Phase.PREFILL:
                    raise ValueError("append_prefill accepts only prefill-phase slots")
                self._check_dims(slot)
        except Exception:
            self._head_shape = prior_shape
            raise
        self.prefill = list(slots)
        self._prefill_done = True
        m = len(self.prefill)
        shape = self.prefill[0].keys.shape
        self._kbuf = np.empty((m + 64, *shape), dtype=self.prefill[0].keys.dtype)
        self._vbuf = np.empty_like(self._kbuf)
        for i, slot in enumerate(self.prefill):
            self._kbuf[i] = slot.keys
            self._vbuf[i] = slot.values

    # -- decode -------------------------------------------------------------

    def append_decode(self, slot: TokenSlot, importance: ImportanceVector | None = None) -> None:
        """Append one decode slot; the aligned score vector gains a zero entry."""
        if not self._prefill_done:
            raise NotPrefilled("decode tokens cannot be cached before the prompt")
        if slot.phase is not Phase.DECODE:
            raise ValueError("append_decode accepts only decode-phase slots")
        self._check_dims(slot)
        self.decode.append(slot)
        idx = self.total_size() - 1
        if idx >= self._kbuf.shape[0]:
            self._kbuf = self._grow(self._kbuf, idx)
            self._vbuf = self._grow(self._vbuf, idx)
        self._kbuf[idx] = slot.keys
        self._vbuf[idx] = slot.values
        if importance is not None:
            importance.append_zero()

    def evict_indices(
        self, indices: Iterable[int], importance: ImportanceVector | None = None
    ) -> None:
        """Permanently remove the given decode-pool indices.

        Survivors keep their relative order (compacting shift-down); the
        aligned score entries are pruned in the same operation.
        """
        victims = sorted(set(int(i) for i in indices))
        if not victims:
            return
        n = len(self.decode)
        if victims[0] < 0 or victims[-1] >= n:
            raise IndexOutOfRange(
                f"eviction index out of range for decode pool of size {n}: {victims}"
            )
        victim_set = set(victims)
        m = len(self.prefill)
        keep = np.ones(n, dtype=bool)
        keep[victims] = False
        kept = n - len(victims)
        self._kbuf[m : m + kept] = self._kbuf[m : m + n][keep]
        self._vbuf[m : m + kept] = self._vbuf[m : m + n][keep]
        self.decode = [s for i, s in enumerate(self.decode) if i not in victim_set]
        if importance is not None:
            importance.prune(victims)

    def overflow(self) -> int:
        """How many decode slots exceed the budget right now."""
        if self.decode_budget is None:
            return 0
        return max(0, len(self.decode) - self.decode_budget)

    def total_size(self) -> int:
        return len(self.prefill) + len(self.decode)

    def decode_positions(self) -> list[int]:
        return [s.global_position for s in self.decode]

    # -- contiguous views for attention ---------------------------------------

    def key_stack(self) -> np.ndarray:
        """All cached keys in slot order, shape (total, n_heads, d_head).

        A read-only view of the internal buffer; do not mutate.
        """
        if self._kbuf is None:
            raise NotPrefilled("no cached keys before the prompt is written")
        return self._kbuf[: self.total_size()]

    def value_stack(self) -> np.ndarray:
        if self._vbuf is None:
            raise NotPrefilled("no cached values before the prompt is written")
        return self._vbuf[: self.total_size()]

    @staticmethod
    def _grow(buf: np.ndarray, need_index: int) -> np.ndarray:
        new = np.empty((max(need_index + 1, 2 * buf.shape[0]), *buf.shape[1:]),
                       dtype=buf.dtype)
        new[: buf.shape[0]] = buf
        return new

    def _check_dims(self, slot: TokenSlot) -> None:
        shape = tuple(slot.keys.shape)
        if slot.values.shape != slot.keys.shape or len(shape) != 2:
            raise DimensionMismatch(
                f"slot {slot.global_position}: keys {slot.keys.shape} vs values {slot.values.shape}"
            )
        if self._head_shape is None:
            self._head_shape = shape
        elif shape != self._head_shape:
            raise DimensionMismatch(
                f"slot {slot.global_position}: head layout {shape} != pool layout {self._head_shape}"
            )
