"""Attention trace files: binary format, synthetic generators, replay.

A trace records one head-averaged (or per-head) attention row per layer per
decode step over the *uncompressed* cache, so a single file can be replayed
under any eviction policy. The byte layout is fixed (see
``docs/trace_format.md``) and shared with the standalone capture tool.

Replay feeds each recorded row to a policy after masking out the positions
that policy has already evicted. Optionally the surviving weights are
rescaled to sum to one first; a live model would redistribute attention
differently, so open-loop numbers carry that approximation and reports flag
it.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from enum import IntEnum
from math import ceil
from typing import BinaryIO, Sequence

import numpy as np

from .cache_core import CachePool, Phase, TokenSlot
from .errors import (
    BadConcentration,
    BadMagic,
    InvalidDipWindow,
    NormalizationViolation,
    TruncatedTrace,
)
from .metrics import PolicyReport, StepRecord
from .policies import POLICY_NOTES, AttentionRow, PolicyConfig, make_policy

MAGIC = b"ATTRC01\x00"
_HEADER_FMT = "<8sQQQQBBH"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

GENERATION_SUM_TOL = 1e-6   # rows must be this clean before they are written
READ_SUM_TOL = 1e-3         # looser on read, absorbs float32 serialization


class TraceSource(IntEnum):
    CAPTURED = 0
    SYNTHETIC = 1
    TOY_MODEL = 2


@dataclass
class TraceHeader:
    prefill_len: int
    n_steps: int
    n_layers: int
    n_heads: int
    head_averaged: bool
    source: TraceSource
    model_tag: str = ""

    def __post_init__(self):
        if self.prefill_len < 1:
            raise ValueError("prefill_len must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("n_layers and n_heads must be >= 1")
        if self.head_averaged and self.n_heads != 1:
            raise ValueError("head-averaged traces store exactly one row per layer")
        self.source = TraceSource(self.source)


@dataclass
class TraceStep:
    """Rows for one decode step: shape (n_layers, n_heads, prefill_len + step)."""

    step: int
    rows: np.ndarray

    def averaged(self, layer: int) -> np.ndarray:
        """Head-averaged row for one layer (float32)."""
        layer_rows = self.rows[layer]
        if layer_rows.shape[0] == 1:
            return layer_rows[0]
        return layer_rows.mean(axis=0)


@dataclass
class TraceFile:
    header: TraceHeader
    steps: list[TraceStep]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceFile):
            return NotImplemented
        if self.header != other.header or len(self.steps) != len(other.steps):
            return False
        return all(
            a.step == b.step and np.array_equal(a.rows, b.rows)
            for a, b in zip(self.steps, other.steps)
        )


# -- serialization -------------------------------------------------------------


def _check_row_sums(rows: np.ndarray, step: int, tol: float) -> None:
    sums = rows.reshape(-1, rows.shape[-1]).astype(np.float64).sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
    if bad.size:
        flat = int(bad[0])
        layer, head = divmod(flat, rows.shape[1])
        raise NormalizationViolation(
            f"step {step}, layer {layer}, head {head}: row sums to "
            f"{sums[flat]!r}, expected 1 within {tol}"
        )


def write_trace(trace: TraceFile, dest) -> None:
    """Serialize a trace to a path or a binary stream (little-endian)."""
    h = trace.header
    if len(trace.steps) != h.n_steps:
        raise ValueError(f"header declares {h.n_steps} steps, got {len(trace.steps)}")
    tag = h.model_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValueError("model_tag longer than 65535 bytes")

    def _write(fh: BinaryIO) -> None:
        fh.write(
            struct.pack(
                _HEADER_FMT,
                MAGIC,
                h.prefill_len,
                h.n_steps,
                h.n_layers,
                h.n_heads,
                int(h.head_averaged),
                int(h.source),
                len(tag),
            )
        )
        fh.write(tag)
        for ts in trace.steps:
            expect = (h.n_layers, h.n_heads, h.prefill_len + ts.step)
            if ts.rows.shape != expect:
                raise ValueError(
                    f"step {ts.step}: rows shape {ts.rows.shape}, expected {expect}"
                )
            _check_row_sums(ts.rows, ts.step, GENERATION_SUM_TOL)
            fh.write(np.ascontiguousarray(ts.rows, dtype="<f4").tobytes())

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "wb") as fh:
            _write(fh)


def read_trace(src) -> TraceFile:
    """Parse and validate a trace from a path or binary stream.

    Raises ``BadMagic`` for a wrong format tag, ``TruncatedTrace`` when the
    payload ends early (with the failing step/layer in the message), and
    ``NormalizationViolation`` when a row strays from sum 1 by more than
    ``READ_SUM_TOL``.
    """

    def _read(fh: BinaryIO) -> TraceFile:
        head = fh.read(_HEADER_SIZE)
        if len(head) < _HEADER_SIZE:
            raise TruncatedTrace(f"file ends inside the {_HEADER_SIZE}-byte header")
        magic, m, t, layers, heads, averaged, source, tag_len = struct.unpack(
            _HEADER_FMT, head
        )
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
        tag_bytes = fh.read(tag_len)
        if len(tag_bytes) < tag_len:
            raise TruncatedTrace("file ends inside the model tag")
        try:
            source_enum = TraceSource(source)
        except ValueError as exc:
            raise BadMagic(f"unknown trace source code {source}") from exc
        try:
            header = TraceHeader(
                m, t, layers, heads, bool(averaged), source_enum,
                tag_bytes.decode("utf-8"),
            )
        except ValueError as exc:
            raise TruncatedTrace(f"inconsistent header: {exc}") from exc

        steps = []
        for step in range(1, t + 1):
            n = m + step
            want = layers * heads * n * 4
            payload = fh.read(want)
            if len(payload) < want:
                raise TruncatedTrace(
                    f"step {step} (of {t}): expected {want} bytes of rows, "
                    f"got {len(payload)}"
                )
            rows = np.frombuffer(payload, dtype="<f4").reshape(layers, heads, n)
            _check_row_sums(rows, step, READ_SUM_TOL)
            steps.append(TraceStep(step, rows.copy()))
        trailing = fh.read(1)
        if trailing:
            raise TruncatedTrace("unexpected bytes after the final declared step")
        return TraceFile(header, steps)

    if hasattr(src, "read"):
        return _read(src)
    with open(src, "rb") as fh:
        return _read(fh)


# -- synthetic generators --------------------------------------------------------


def _finalize_row(row: np.ndarray) -> np.ndarray:
    total = row.sum()
    if total <= 0:
        raise ValueError("generated row has no mass")
    return (row / total).astype(np.float32)


def gen_heavy_hitter_trace(
    prefill_len: int,
    steps: int,
    hitters: Sequence[tuple[int, float]],
    dips: Sequence[tuple[int, int, int]] = (),
    seed: int = 0,
    n_layers: int = 1,
    position_noise: float = 0.1,
    step_noise: float = 0.05,
    dip_level: float = 0.5,
    self_weight: float = 0.0,
    hitter_mass_cap: float = 0.9,
    burst_prob: float = 1.0,
    burst_floor: float = 0.05,
) -> TraceFile:
    """Rows with sustained-attention tokens that can temporarily go quiet.

    Each (position, base_mass) hitter receives roughly its base mass at every
    step once it exists, renormalized if hitters jointly exceed
    ``hitter_mass_cap``. A (position, start_step, length) dip silences that
    hitter for the given step interval, dropping it to ``dip_level`` times
    the uniform background level. The remaining mass is spread over the other
    slots with a persistent per-position factor (``position_noise``), a
    per-step jitter (``step_noise``), and optionally a boosted self weight
    for the newest token (``self_weight`` as a fraction of non-hitter mass).

    ``burst_prob`` below 1 makes background attention intermittent: each
    step a token is active with that probability and otherwise sits at the
    flat ``burst_floor`` level, hiding its per-position factor from any
    single-step observer.
    """
    if prefill_len < 1 or steps < 1:
        raise ValueError("prefill_len and steps must be >= 1")
    if not 0 <= position_noise < 1 or not 0 <= step_noise < 1:
        raise ValueError("noise amplitudes must lie in [0, 1)")
    if not 0 <= self_weight < 1:
        raise ValueError("self_weight must lie in [0, 1)")
    if dip_level < 0:
        raise ValueError("dip_level must be >= 0")
    if not 0 < hitter_mass_cap < 1:
        raise ValueError("hitter_mass_cap must lie in (0, 1)")
    if not 0 < burst_prob <= 1:
        raise ValueError("burst_prob must lie in (0, 1]")
    if burst_floor <= 0:
        raise ValueError("burst_floor must be > 0")
    total = prefill_len + steps
    hitter_map: dict[int, float] = {}
    for pos, mass in hitters:
        if not 0 <= pos < total:
            raise ValueError(f"hitter position {pos} outside cache of {total}")
        if mass <= 0:
            raise ValueError(f"hitter at {pos} needs positive mass, got {mass}")
        hitter_map[int(pos)] = float(mass)
    dip_map: dict[int, list[tuple[int, int]]] = {}
    for pos, start, length in dips:
        if int(pos) not in hitter_map:
            raise InvalidDipWindow(f"dip at position {pos} does not name a hitter")
        if length < 1 or start < 1 or start + length - 1 > steps:
            raise InvalidDipWindow(
                f"dip [{start}, {start + length - 1}] must lie within steps 1..{steps}"
            )
        dip_map.setdefault(int(pos), []).append((int(start), int(length)))

    def in_dip(pos: int, t: int) -> bool:
        return any(s <= t < s + l for s, l in dip_map.get(pos, ()))

    master = np.random.default_rng(seed)
    steps_out: list[np.ndarray] = []
    layer_rngs = [np.random.default_rng(s) for s in master.integers(0, 2**63, n_layers)]
    eta = [rng.uniform(-1.0, 1.0, total) for rng in layer_rngs]

    for t in range(1, steps + 1):
        n = prefill_len + t
        self_pos = n - 1
        layer_rows = []
        for layer in range(n_layers):
            zeta = (
                layer_rngs[layer].uniform(-1.0, 1.0, n)
                if step_noise > 0
                else np.zeros(n)
            )
            row = np.zeros(n, dtype=np.float64)
            active = {p: m for p, m in hitter_map.items() if p < n and not in_dip(p, t)}
            mass_sum = sum(active.values())
            if mass_sum > hitter_mass_cap:
                scale = hitter_mass_cap / mass_sum
                active = {p: m * scale for p, m in active.items()}
                mass_sum = hitter_mass_cap
            for p, m_ in active.items():
                row[p] = m_
            rest = 1.0 - mass_sum

            special = set(active)
            boost_self = self_weight > 0 and self_pos not in special
            if boost_self:
                row[self_pos] = self_weight * rest
                rest *= 1.0 - self_weight
                special.add(self_pos)

            background = np.array([p for p in range(n) if p not in special])
            if background.size:
                u = (1.0 + position_noise * eta[layer][background]) * (
                    1.0 + step_noise * zeta[background]
                )
                if burst_prob < 1.0:
                    gate = layer_rngs[layer].random(background.size) < burst_prob
                    u = np.where(gate, u, burst_floor)
                dipped = np.array([in_dip(int(p), t) for p in background])
                u[dipped] = dip_level
                row[background] = rest * u / u.sum()
            elif boost_self:
                row[self_pos] += rest
            else:
                row[list(active)] += rest / max(1, len(active))
            layer_rows.append(_finalize_row(row))
        steps_out.append(np.stack(layer_rows)[:, None, :])

    tag = json.dumps(
        {
            "generator": "heavy_hitter",
            "prefill_len": prefill_len,
            "steps": steps,
            "hitters": [[p, m] for p, m in hitter_map.items()],
            "dips": [[p, s, l] for p, spans in dip_map.items() for s, l in spans],
            "seed": seed,
            "position_noise": position_noise,
            "step_noise": step_noise,
            "dip_level": dip_level,
            "self_weight": self_weight,
            "burst_prob": burst_prob,
            "burst_floor": burst_floor,
        },
        sort_keys=True,
    )
    header = TraceHeader(prefill_len, steps, n_layers, 1, True, TraceSource.SYNTHETIC, tag)
    return TraceFile(header, [TraceStep(t + 1, rows) for t, rows in enumerate(steps_out)])


def gen_recency_burst_trace(
    prefill_len: int,
    steps: int,
    concentration: float,
    seed: int = 0,
    n_layers: int = 1,
    window: int = 256,
    window_mass: float = 0.95,
    top_mass: float = 0.85,
) -> TraceFile:
    """Rows where a small slice of the recent-token window carries its mass.

    Within the trailing ``window`` decode tokens (or all of them early on),
    the top ``concentration`` fraction of positions receives ``top_mass`` of
    the window's share; concentration 1.0 degenerates to a uniform window.
    Mass outside the window is spread uniformly.
    """
    if not 0 < concentration <= 1:
        raise BadConcentration(f"concentration must be in (0, 1], got {concentration}")
    if prefill_len < 1 or steps < 1:
        raise ValueError("prefill_len and steps must be >= 1")
    master = np.random.default_rng(seed)
    layer_rngs = [np.random.default_rng(s) for s in master.integers(0, 2**63, n_layers)]
    steps_out = []
    for t in range(1, steps + 1):
        n = prefill_len + t
        w = min(window, t)
        k = ceil(concentration * w)
        layer_rows = []
        for layer in range(n_layers):
            row = np.zeros(n, dtype=np.float64)
            outside = n - w
            row[:outside] = (1.0 - window_mass) / outside
            win = np.full(w, 0.0)
            if k >= w:
                win[:] = window_mass / w
            else:
                top = layer_rngs[layer].choice(w, size=k, replace=False)
                win[:] = (1.0 - top_mass) * window_mass / (w - k)
                win[top] = top_mass * window_mass / k
            row[outside:] = win
            layer_rows.append(_finalize_row(row))
        steps_out.append(np.stack(layer_rows)[:, None, :])
    tag = json.dumps(
        {
            "generator": "recency_burst",
            "prefill_len": prefill_len,
            "steps": steps,
            "concentration": concentration,
            "window": window,
            "seed": seed,
        },
        sort_keys=True,
    )
    header = TraceHeader(prefill_len, steps, n_layers, 1, True, TraceSource.SYNTHETIC, tag)
    return TraceFile(header, [TraceStep(t + 1, rows) for t, rows in enumerate(steps_out)])


def trace_from_closed_loop(run, model_tag: str | None = None) -> TraceFile:
    """Package a full-cache closed-loop run's attention rows as a trace.

    The run must not have evicted anything, otherwise its rows are not the
    uncompressed rows a trace promises.
    """
    if any(d.victim_indices for out in run.steps for d in out.decisions):
        raise ValueError("only eviction-free runs can be exported as traces")
    spec = run.spec
    m = len(run.prompt)
    steps = []
    for out in run.steps:
        rows = np.stack([r.weights.astype(np.float32) for r in out.attention_rows])
        steps.append(TraceStep(out.step, rows[:, None, :]))
    tag = model_tag or json.dumps(
        {"generator": "toy_model", **spec.to_dict(), "prompt_len": m}, sort_keys=True
    )
    header = TraceHeader(
        m, len(steps), spec.n_layers, 1, True, TraceSource.TOY_MODEL, tag
    )
    return TraceFile(header, steps)


# -- replay --------------------------------------------------------------------


def replay(
    trace: TraceFile,
    config: PolicyConfig,
    renormalize: bool = True,
) -> PolicyReport:
    """Drive one policy per layer over a recorded trace.

    Each step appends a bookkeeping slot for the new token, extracts the
    recorded row restricted to positions the policy still caches, optionally
    renormalizes it, lets the policy observe and (on overflow) select
    victims, then executes the eviction. Retained mass is measured against
    the raw uncompressed row, so mass on already-evicted positions counts as
    lost.
    """
    header = trace.header
    m = header.prefill_len
    cfg = config.resolved()
    report = PolicyReport(
        policy_label=cfg.label(),
        policy_kind=cfg.kind.value,
        decode_budget=cfg.decode_budget,
        prefill_len=m,
        n_steps=header.n_steps,
        n_layers=header.n_layers,
        mode="replay",
        meta={
            "renormalize": renormalize,
            "trace_source": header.source.name.lower(),
            "trace_tag": header.model_tag,
            "open_loop_caveat": (
                "replay rescales recorded attention over survivors; a live "
                "model would redistribute it differently"
            ),
        },
    )
    if cfg.kind in POLICY_NOTES:
        report.meta["policy_note"] = POLICY_NOTES[cfg.kind]
    prefill_idx = np.arange(m, dtype=np.int64)
    for layer in range(header.n_layers):
        pool = CachePool(cfg.decode_budget)
        pool.append_prefill([TokenSlot.marker(p, Phase.PREFILL) for p in range(m)])
        policy = make_policy(cfg)
        for ts in trace.steps:
            t0 = time.perf_counter_ns()
            t = ts.step
            full = np.asarray(ts.averaged(layer), dtype=np.float64)
            pool.append_decode(TokenSlot.marker(m + t - 1, Phase.DECODE))
            pre_size = pool.total_size()
            decode_positions = pool.decode_positions()
            live = np.concatenate([prefill_idx, np.asarray(decode_positions, dtype=np.int64)])
            masked = full[live]
            if renormalize:
                mass = masked.sum()
                if mass > 0:
                    masked = masked / mass
            row = AttentionRow(masked, t, m)

            p0 = time.perf_counter_ns()
            policy.on_append()
            policy.observe(row)
            decision = policy.select(decode_positions, pool.overflow(), t)
            policy.on_evict(decision.victim_indices)
            policy_ns = time.perf_counter_ns() - p0

            victim_positions = tuple(
                pool.decode[i].global_position for i in decision.victim_indices
            )
            pool.evict_indices(decision.victim_indices)
            survivors = np.concatenate(
                [prefill_idx, np.asarray(pool.decode_positions(), dtype=np.int64)]
            )
            total_mass = float(full.sum())
            kept = float(full[survivors].sum()) / total_mass if total_mass > 0 else 0.0
            report.records.append(
                StepRecord(
                    layer=layer,
                    step=t,
                    pre_enforce_size=pre_size,
                    cache_total=pool.total_size(),
                    decode_size=len(pool.decode),
                    evicted_positions=victim_positions,
                    retained_mass=kept,
                    policy_ns=policy_ns,
                    step_ns=time.perf_counter_ns() - t0,
                )
            )
        report.final_decode_positions.append(pool.decode_positions())
    return report
