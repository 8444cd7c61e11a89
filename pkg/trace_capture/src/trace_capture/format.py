"""ATTRC01 writer and validator, implemented from the documented byte layout.

Deliberately independent of the simulator package: this file and the format
document are the whole contract between the two tools.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"ATTRC01\x00"
_HEADER_FMT = "<8sQQQQBBH"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

SOURCE_CAPTURED = 0
SOURCE_SYNTHETIC = 1
SOURCE_TOY_MODEL = 2
_SOURCE_NAMES = {0: "captured", 1: "synthetic", 2: "toy_model"}

WRITE_SUM_TOL = 1e-6
READ_SUM_TOL = 1e-3


class TraceFormatError(Exception):
    pass


class BadMagic(TraceFormatError):
    pass


class TruncatedTrace(TraceFormatError):
    pass


class NormalizationViolation(TraceFormatError):
    pass


@dataclass
class TraceSummary:
    prefill_len: int
    n_steps: int
    n_layers: int
    n_heads: int
    head_averaged: bool
    source: str
    model_tag: str

    def describe(self) -> str:
        return (
            f"prefill_len={self.prefill_len} steps={self.n_steps} "
            f"layers={self.n_layers} heads={self.n_heads} "
            f"head_averaged={self.head_averaged} source={self.source}"
        )


def renormalize(row: np.ndarray) -> np.ndarray:
    """Rescale a weight row so its float64 sum is exactly 1."""
    row64 = np.asarray(row, dtype=np.float64)
    total = row64.sum()
    if total <= 0:
        raise ValueError("attention row has no mass")
    return row64 / total


def write_attrc(
    dest,
    prefill_len: int,
    step_rows: Sequence[np.ndarray],
    head_averaged: bool,
    source: int = SOURCE_CAPTURED,
    model_tag: str = "",
) -> None:
    """Write one trace: ``step_rows[t-1]`` has shape (layers, heads, prefill_len+t).

    Rows are renormalized before the write-side sum check, absorbing the
    float32 rounding a capture pipeline introduces.
    """
    if prefill_len < 1 or not step_rows:
        raise ValueError("need prefill_len >= 1 and at least one step")
    layers, heads = step_rows[0].shape[0], step_rows[0].shape[1]
    if head_averaged and heads != 1:
        raise ValueError("head-averaged traces must carry exactly one row per layer")
    tag = model_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValueError("model tag longer than 65535 bytes")

    def _write(fh: BinaryIO) -> None:
        fh.write(
            struct.pack(
                _HEADER_FMT, MAGIC, prefill_len, len(step_rows), layers, heads,
                int(head_averaged), source, len(tag),
            )
        )
        fh.write(tag)
        for t, rows in enumerate(step_rows, start=1):
            expect = (layers, heads, prefill_len + t)
            if rows.shape != expect:
                raise ValueError(f"step {t}: rows shape {rows.shape}, expected {expect}")
            flat = rows.reshape(layers * heads, prefill_len + t)
            out = np.empty_like(flat, dtype=np.float64)
            for i in range(flat.shape[0]):
                out[i] = renormalize(flat[i])
            sums = out.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > WRITE_SUM_TOL):
                raise NormalizationViolation(f"step {t}: row sum off after renormalize")
            fh.write(np.ascontiguousarray(out, dtype="<f4").tobytes())

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "wb") as fh:
            _write(fh)


def validate_attrc(src) -> TraceSummary:
    """Re-check magic, declared lengths, and row normalization of a trace file."""

    def _read(fh: BinaryIO) -> TraceSummary:
        head = fh.read(_HEADER_SIZE)
        if len(head) < _HEADER_SIZE:
            raise TruncatedTrace(f"file ends inside the {_HEADER_SIZE}-byte header")
        magic, m, t, layers, heads, averaged, source, tag_len = struct.unpack(
            _HEADER_FMT, head
        )
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
        if source not in _SOURCE_NAMES:
            raise BadMagic(f"unknown source code {source}")
        if m < 1 or t < 1 or layers < 1 or heads < 1:
            raise TruncatedTrace("header counts must all be >= 1")
        if averaged and heads != 1:
            raise TruncatedTrace("head_averaged header with more than one head")
        tag = fh.read(tag_len)
        if len(tag) < tag_len:
            raise TruncatedTrace("file ends inside the model tag")
        for step in range(1, t + 1):
            n = m + step
            for layer in range(layers):
                for head_i in range(heads):
                    payload = fh.read(n * 4)
                    if len(payload) < n * 4:
                        raise TruncatedTrace(
                            f"step {step}, layer {layer}, head {head_i}: "
                            f"expected {n * 4} bytes, got {len(payload)}"
                        )
                    row = np.frombuffer(payload, dtype="<f4").astype(np.float64)
                    total = row.sum()
                    if abs(total - 1.0) > READ_SUM_TOL:
                        raise NormalizationViolation(
                            f"step {step}, layer {layer}, head {head_i}: "
                            f"row sums to {total!r}"
                        )
        if fh.read(1):
            raise TruncatedTrace("unexpected bytes after the final declared step")
        return TraceSummary(
            m, t, layers, heads, bool(averaged), _SOURCE_NAMES[source],
            tag.decode("utf-8"),
        )

    if hasattr(src, "read"):
        return _read(src)
    with open(src, "rb") as fh:
        return _read(fh)
