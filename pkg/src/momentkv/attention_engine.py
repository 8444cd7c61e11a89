"""Deterministic toy multi-head decoder for closed-loop cache experiments.

The model is intentionally untrained: seeded random projections, pre-norm
residual blocks, sinusoidal absolute positions, greedy argmax decoding. What
matters is that attention is computed over exactly what the cache pools hold,
so an eviction at step t causally changes every later step. Identical seed
and prompt give bit-identical weights, tokens, and attention rows.

Model arithmetic is float32; importance accumulation stays float64 inside
the policies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cache_core import CachePool, Phase, TokenSlot
from .errors import EmptyPrompt, TokenOutOfVocab
from .policies import AttentionRow, EvictionDecision, EvictionPolicy

_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    """Shape and seed of the toy decoder; everything else is derived."""

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 128
    seed: int = 0
    d_ff: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
            "d_ff": self.d_ff,
        }


@dataclass
class StepOutput:
    """Everything one decode step produced, for reports and trace export."""

    step: int
    logits: np.ndarray
    attention_rows: list[AttentionRow]
    raw_head_attention: list[np.ndarray] | None
    pre_enforce_sizes: list[int]
    decisions: list[EvictionDecision]
    evicted_positions: list[tuple[int, ...]]
    policy_ns: list[int]
    step_ns: int


def positional_encoding(position: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of an absolute global position.

    Survivor slots keep their original encoding after neighbours are evicted,
    mirroring real systems where positions are baked into cached keys.
    """
    if position < 0:
        raise ValueError("position must be >= 0")
    if d_model % 2 != 0:
        raise ValueError("d_model must be even for sin/cos pairing")
    i = np.arange(d_model // 2, dtype=np.float64)
    angles = position / np.power(10000.0, 2.0 * i / d_model)
    enc = np.zeros(d_model, dtype=np.float64)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc.astype(np.float32)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mean) / np.sqrt(var + _LN_EPS)).astype(np.float32)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


class ToyDecoder:
    """Multi-head decoder with per-layer cache pools it reads attention from."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)

        def mat(*shape):
            return (rng.standard_normal(shape) * 0.08).astype(np.float32)

        self.embedding = mat(spec.vocab_size, spec.d_model)
        self.layers = []
        for _ in range(spec.n_layers):
            self.layers.append(
                {
                    "wq": mat(spec.d_model, spec.d_model),
                    "wk": mat(spec.d_model, spec.d_model),
                    "wv": mat(spec.d_model, spec.d_model),
                    "wo": mat(spec.d_model, spec.d_model),
                    "w1": mat(spec.d_model, spec.d_ff),
                    "b1": np.zeros(spec.d_ff, dtype=np.float32),
                    "w2": mat(spec.d_ff, spec.d_model),
                    "b2": np.zeros(spec.d_model, dtype=np.float32),
                }
            )
        self._scale = np.float32(1.0 / np.sqrt(spec.d_head))

    # -- embedding helpers ----------------------------------------------------

    def _embed(self, token_id: int, position: int) -> np.ndarray:
        if not 0 <= token_id < self.spec.vocab_size:
            raise TokenOutOfVocab(
                f"token id {token_id} outside vocab of {self.spec.vocab_size}"
            )
        return self.embedding[token_id] + positional_encoding(position, self.spec.d_model)

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        # (..., d_model) -> (..., n_heads, d_head)
        return x.reshape(*x.shape[:-1], self.spec.n_heads, self.spec.d_head)

    def _logits(self, x: np.ndarray) -> np.ndarray:
        return _layer_norm(x) @ self.embedding.T

    # -- prefill ----------------------------------------------------------------

    def prefill(
        self, prompt_token_ids: list[int], decode_budget: int | None = None
    ) -> tuple[list[CachePool], np.ndarray]:
        """Process the whole prompt in parallel, filling one pool per layer.

        Returns the pools and the logits that predict the first decode token.
        """
        if not prompt_token_ids:
            raise EmptyPrompt("prompt must contain at least one token")
        spec = self.spec
        m = len(prompt_token_ids)
        x = np.stack([self._embed(tok, pos) for pos, tok in enumerate(prompt_token_ids)])

        causal = np.triu(np.full((m, m), -np.inf, dtype=np.float32), k=1)
        pools: list[CachePool] = []
        for layer in self.layers:
            h = _layer_norm(x)
            q = self._split_heads(h @ layer["wq"])  # (m, H, dh)
            k = self._split_heads(h @ layer["wk"])
            v = self._split_heads(h @ layer["wv"])

            scores = np.einsum("qhd,khd->hqk", q, k) * self._scale
            attn = _softmax(scores + causal[None, :, :])  # (H, m, m)
            ctx = np.einsum("hqk,khd->qhd", attn, v)
            x = x + ctx.reshape(m, spec.d_model) @ layer["wo"]
            h2 = _layer_norm(x)
            x = x + np.maximum(h2 @ layer["w1"] + layer["b1"], 0.0) @ layer["w2"] + layer["b2"]

            pool = CachePool(decode_budget)
            slots = [
                TokenSlot(pos, k[pos].copy(), v[pos].copy(), Phase.PREFILL)
                for pos in range(m)
            ]
            pool.append_prefill(slots)
            pools.append(pool)

        return pools, self._logits(x[-1])

    # -- decode -------------------------------------------------------------------

    def decode_step(
        self,
        pools: list[CachePool],
        token_id: int,
        step: int,
        policies: list[EvictionPolicy],
        capture_heads: bool = False,
    ) -> tuple[StepOutput, int]:
        """Run one decode step: append KV, attend, score, enforce, predict.

        Per layer the order is fixed: compute q/k/v for the incoming token,
        append its KV slot (score starts at zero), compute attention over the
        entire pool including the new slot, fold the head-averaged row into
        the policy, then evict the policy's victims if the pool overflows.
        The attention output itself is taken before eviction.
        """
        spec = self.spec
        t0 = time.perf_counter_ns()
        m = pools[0].prefill_len
        position = m + step - 1
        x = self._embed(token_id, position)

        rows: list[AttentionRow] = []
        raw_heads: list[np.ndarray] | None = [] if capture_heads else None
        decisions: list[EvictionDecision] = []
        evicted_positions: list[tuple[int, ...]] = []
        pre_sizes: list[int] = []
        policy_ns: list[int] = []

        for pool, layer, policy in zip(pools, self.layers, policies):
            h = _layer_norm(x)
            q = self._split_heads(h @ layer["wq"])  # (H, dh)
            k = self._split_heads(h @ layer["wk"])
            v = self._split_heads(h @ layer["wv"])

            slot = TokenSlot(position, k, v, Phase.DECODE)
            pool.append_decode(slot)
            pre_sizes.append(pool.total_size())

            keys = pool.key_stack()      # (n, H, dh)
            values = pool.value_stack()
            scores = np.einsum("hd,nhd->hn", q, keys) * self._scale
            attn = _softmax(scores)      # (H, n)
            averaged = attn.mean(axis=0)
            row = AttentionRow(averaged, step, m)
            rows.append(row)
            if raw_heads is not None:
                raw_heads.append(attn.copy())

            ctx = np.einsum("hn,nhd->hd", attn, values)
            x = x + ctx.reshape(spec.d_model) @ layer["wo"]
            h2 = _layer_norm(x)
            x = x + np.maximum(h2 @ layer["w1"] + layer["b1"], 0.0) @ layer["w2"] + layer["b2"]

            decode_positions = pool.decode_positions()
            overflow = pool.overflow()
            p0 = time.perf_counter_ns()
            policy.on_append()
            policy.observe(row)
            decision = policy.select(decode_positions, overflow, step)
            policy.on_evict(decision.victim_indices)
            policy_ns.append(time.perf_counter_ns() - p0)
            evicted_positions.append(
                tuple(pool.decode[i].global_position for i in decision.victim_indices)
            )
            pool.evict_indices(decision.victim_indices)
            decisions.append(decision)

        logits = self._logits(x)
        next_token = int(np.argmax(logits))  # first occurrence = smallest id on ties
        out = StepOutput(
            step=step,
            logits=logits,
            attention_rows=rows,
            raw_head_attention=raw_heads,
            pre_enforce_sizes=pre_sizes,
            decisions=decisions,
            evicted_positions=evicted_positions,
            policy_ns=policy_ns,
            step_ns=time.perf_counter_ns() - t0,
        )
        return out, next_token


@dataclass
class ClosedLoopRun:
    """A finished closed-loop generation with everything reports need."""

    spec: ModelSpec
    prompt: list[int]
    tokens: list[int]
    steps: list[StepOutput]
    pools: list[CachePool]
    policies: list[EvictionPolicy]
    wall_ns: int = 0


def run_closed_loop(
    spec: ModelSpec,
    prompt_token_ids: list[int],
    n_steps: int,
    policy_factory,
    decode_budget: int | None,
    capture_heads: bool = False,
) -> ClosedLoopRun:
    """Drive the toy decoder for ``n_steps`` under one policy per layer.

    ``policy_factory`` is called once per layer; eviction state is never
    shared across layers. The first decode token comes from the prompt's
    final logits (greedy).
    """
    engine = ToyDecoder(spec)
    policies = [policy_factory() for _ in range(spec.n_layers)]
    t0 = time.perf_counter_ns()
    pools, logits = engine.prefill(prompt_token_ids, decode_budget)
    token = int(np.argmax(logits))
    tokens = []
    outputs = []
    for step in range(1, n_steps + 1):
        tokens.append(token)
        out, token = engine.decode_step(pools, token, step, policies, capture_heads)
        outputs.append(out)
    return ClosedLoopRun(
        spec=spec,
        prompt=list(prompt_token_ids),
        tokens=tokens,
        steps=outputs,
        pools=pools,
        policies=policies,
        wall_ns=time.perf_counter_ns() - t0,
    )
