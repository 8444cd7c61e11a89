"""Policy behaviour: momentum scoring, baselines, tie-breaks, equivalences.

The momentum oracle here is deliberately independent of the implementation:
it recomputes each surviving token's score from the raw observed weights as
sum over steps of alpha^(t-s) * weight(s).
"""

import itertools

import numpy as np
import pytest

from momentkv.errors import (
    BudgetTooSmall,
    LengthMismatch,
    NoEvictableTokens,
    NormalizationViolation,
    OverflowTooLarge,
)
from momentkv.policies import (
    AttentionRow,
    FullCachePolicy,
    H2OPolicy,
    MomentKVPolicy,
    PolicyConfig,
    PolicyKind,
    ScopeSlidePolicy,
    StreamingSinkPolicy,
    make_policy,
    validate_attention_row,
)

M = 3  # prompt length used by most fixtures here


def closed_form_score(history: list[float], alpha: float) -> float:
    """Independent oracle: unrolled decay sum over a token's observed weights."""
    total = 0.0
    t = len(history)
    for s, weight in enumerate(history, start=1):
        total += (alpha ** (t - s)) * weight
    return total


def feed(policy, decode_weights, step, prefill=None):
    """Drive one observe with an arbitrary decode slice (prefill filled in)."""
    dec = np.asarray(decode_weights, dtype=np.float64)
    if prefill is None:
        rest = max(0.0, 1.0 - dec.sum())
        prefill = np.full(M, rest / M)
    row = AttentionRow(np.concatenate([prefill, dec]), step, M)
    policy.observe(row)
    return row


class TestMomentKVObserve:
    def test_decayed_plus_current(self):
        policy = MomentKVPolicy(0.5)
        policy.on_append()
        policy.importance.scores = np.array([0.4])
        feed(policy, [0.2], step=2)
        assert policy.importance.scores[0] == pytest.approx(0.5 * 0.4 + 0.2, abs=1e-15)

    def test_fresh_token_score_is_its_self_weight(self):
        policy = MomentKVPolicy(0.73)
        policy.on_append()
        w = 0.37
        feed(policy, [w], step=1)
        assert policy.importance.scores[0] == w  # alpha * 0 + w, exactly
        assert policy.importance.scores[0] > 0

    def test_alpha_zero_mirrors_latest_slice(self):
        policy = MomentKVPolicy(0.0)
        for _ in range(3):
            policy.on_append()
        feed(policy, [0.1, 0.2, 0.3], step=1)
        feed(policy, [0.05, 0.6, 0.05], step=2)
        assert policy.importance.scores.tolist() == [0.05, 0.6, 0.05]

    def test_length_mismatch(self):
        policy = MomentKVPolicy(0.9)
        policy.on_append()
        with pytest.raises(LengthMismatch):
            policy.observe(AttentionRow(np.ones(M + 3) / (M + 3), 1, M))

    def test_matches_closed_form_over_random_steps(self):
        rng = np.random.default_rng(7)
        alpha = 0.93
        policy = MomentKVPolicy(alpha)
        histories: list[list[float]] = []
        for step in range(1, 61):
            policy.on_append()
            histories.append([])
            dec = rng.random(len(histories)) + 1e-3
            dec = 0.7 * dec / dec.sum()
            for hist, w in zip(histories, dec):
                hist.append(float(w))
            feed(policy, dec, step)
        for i, hist in enumerate(histories):
            assert policy.importance.scores[i] == pytest.approx(
                closed_form_score(hist, alpha), abs=1e-9
            )


class TestMomentKVSelect:
    def run_select(self, scores, overflow, positions=None):
        policy = MomentKVPolicy(0.9)
        for _ in scores:
            policy.on_append()
        policy.importance.scores = np.array(scores, dtype=np.float64)
        if positions is None:
            positions = [M + i for i in range(len(scores))]
        return policy.select(positions, overflow, step=5)

    def test_unique_minimum(self):
        decision = self.run_select([0.5, 0.1, 0.3], overflow=1)
        assert decision.victim_indices == (1,)
        assert decision.scores_snapshot.tolist() == [0.5, 0.1, 0.3]

    def test_tie_breaks_toward_older_position(self):
        decision = self.run_select([0.2, 0.2, 0.9], overflow=1)
        assert decision.victim_indices == (0,)

    def test_zero_overflow_is_empty(self):
        decision = self.run_select([0.2, 0.9], overflow=0)
        assert decision.victim_indices == ()

    def test_overflow_too_large(self):
        with pytest.raises(OverflowTooLarge):
            self.run_select([0.2, 0.9], overflow=3)

    def test_exhaustive_optimality_small_pools(self):
        rng = np.random.default_rng(11)
        for n in range(1, 9):
            for trial in range(3):
                if trial == 2:  # force heavy ties
                    scores = rng.choice([0.1, 0.2, 0.3], size=n).tolist()
                else:
                    scores = rng.random(n).round(3).tolist()
                for overflow in range(n + 1):
                    decision = self.run_select(scores, overflow)
                    got = sum(scores[i] for i in decision.victim_indices)
                    best = min(
                        (sum(scores[i] for i in combo)
                         for combo in itertools.combinations(range(n), overflow)),
                        default=0.0,
                    )
                    assert got == pytest.approx(best, abs=1e-12)
                    # documented tie-break: sort by (score, position), take first k
                    expected = tuple(sorted(
                        sorted(range(n), key=lambda i: (scores[i], i))[:overflow]
                    ))
                    assert decision.victim_indices == expected


class TestStreamingSink:
    def test_sink_plus_window_rule(self):
        # prompt of 8 absorbs all 4 sinks; window keeps the 4 newest,
        # so positions 8 and 9 (indices 0 and 1) are evicted
        policy = StreamingSinkPolicy(sink_size=4, decode_budget=4)
        positions = [8, 9, 10, 11, 12, 13]
        for _ in positions:
            policy.on_append()
        row = AttentionRow(np.ones(8 + 6) / 14, 6, 8)
        policy.observe(row)
        decision = policy.select(positions, overflow=2, step=6)
        assert decision.victim_indices == (0, 1)

    def test_under_budget_keeps_everything(self):
        policy = StreamingSinkPolicy(sink_size=4, decode_budget=4)
        positions = [8, 9, 10]
        for _ in positions:
            policy.on_append()
        policy.observe(AttentionRow(np.ones(11) / 11, 3, 8))
        assert policy.select(positions, 0, step=3).victim_indices == ()

    def test_sink_zero_is_pure_sliding_window(self):
        policy = StreamingSinkPolicy(sink_size=0, decode_budget=3)
        positions = [2, 3, 4, 5, 6]
        for _ in positions:
            policy.on_append()
        policy.observe(AttentionRow(np.ones(2 + 5) / 7, 5, 2))
        decision = policy.select(positions, overflow=2, step=5)
        assert decision.victim_indices == (0, 1)

    def test_short_prompt_reserves_decode_side_sinks(self):
        # prompt of 1, 3 sinks: positions 1 and 2 are decode-side sinks
        policy = StreamingSinkPolicy(sink_size=3, decode_budget=4)
        positions = [1, 2, 3, 4, 5, 6]
        for _ in positions:
            policy.on_append()
        policy.observe(AttentionRow(np.ones(7) / 7, 6, 1))
        decision = policy.select(positions, overflow=2, step=6)
        # keep sinks {1,2} plus the 2 newest {5,6}
        assert decision.victim_indices == (2, 3)

    def test_budget_smaller_than_decode_side_sinks(self):
        policy = StreamingSinkPolicy(sink_size=6, decode_budget=2)
        positions = [1, 2, 3, 4]
        for _ in positions:
            policy.on_append()
        policy.observe(AttentionRow(np.ones(5) / 5, 4, 1))
        with pytest.raises(BudgetTooSmall):
            policy.select(positions, overflow=2, step=4)


class TestH2O:
    def test_hand_simulated_example(self):
        policy = H2OPolicy(recency_window=1, decode_budget=4)
        for _ in range(4):
            policy.on_append()
        policy.cum_scores = np.array([0.9, 0.05, 0.3, 0.12])
        positions = [M, M + 1, M + 2, M + 3]
        decision = policy.select(positions, overflow=1, step=9)
        assert decision.victim_indices == (1,)

    def test_accumulates_without_decay(self):
        policy = H2OPolicy(recency_window=0)
        policy.on_append()
        feed(policy, [0.4], 1)
        feed(policy, [0.3], 2)
        assert policy.cum_scores[0] == pytest.approx(0.7, abs=1e-15)

    def test_everything_exempt_raises(self):
        policy = H2OPolicy(recency_window=8, decode_budget=16)
        for _ in range(3):
            policy.on_append()
        policy.cum_scores = np.array([0.1, 0.2, 0.3])
        with pytest.raises(NoEvictableTokens):
            policy.select([M, M + 1, M + 2], overflow=1, step=3)

    def test_window_must_fit_budget(self):
        with pytest.raises(BudgetTooSmall):
            H2OPolicy(recency_window=4, decode_budget=4)

    def test_alpha_one_momentum_matches_cumulative(self):
        """Replaying one weight stream through both scorers must agree exactly."""
        rng = np.random.default_rng(3)
        momentum = MomentKVPolicy(1.0)
        h2o = H2OPolicy(recency_window=0)
        for step in range(1, 41):
            momentum.on_append()
            h2o.on_append()
            dec = rng.random(step) + 1e-3
            dec = 0.8 * dec / dec.sum()
            feed(momentum, dec, step)
            feed(h2o, dec, step)
        assert np.max(np.abs(momentum.importance.scores - h2o.cum_scores)) <= 1e-12


class TestScopeSlide:
    def test_heavy_keep_zero_is_sliding_window(self):
        policy = ScopeSlidePolicy(heavy_keep=0, decode_budget=3)
        positions = [M + i for i in range(5)]
        for _ in positions:
            policy.on_append()
        feed(policy, [0.9, 0.02, 0.02, 0.02, 0.04], 5)
        decision = policy.select(positions, overflow=2, step=5)
        assert decision.victim_indices == (0, 1)  # oldest go, peak ignored

    def test_peaked_token_survives_despite_age(self):
        policy = ScopeSlidePolicy(heavy_keep=3, decode_budget=4)
        positions = [M + i for i in range(5)]
        for _ in positions:
            policy.on_append()
        feed(policy, [0.8, 0.01, 0.02, 0.03, 0.04], 5)
        decision = policy.select(positions, overflow=1, step=5)
        # recency window protects only index 4; among 0..3 the lowest goes
        assert decision.victim_indices == (1,)

    def test_under_budget_keeps_everything(self):
        policy = ScopeSlidePolicy(heavy_keep=2, decode_budget=4)
        positions = [M, M + 1]
        for _ in positions:
            policy.on_append()
        feed(policy, [0.5, 0.3], 2)
        assert policy.select(positions, 0, step=2).victim_indices == ()

    def test_heavy_keep_must_fit_budget(self):
        with pytest.raises(BudgetTooSmall):
            ScopeSlidePolicy(heavy_keep=4, decode_budget=4)


class TestFullCache:
    def test_never_selects(self):
        policy = FullCachePolicy()
        policy.on_append()
        feed(policy, [1.0 - 3 / 4 * 1.0], 1, prefill=np.full(M, 0.25))
        assert policy.select([M], 0, step=1).victim_indices == ()

    def test_cannot_satisfy_overflow(self):
        policy = FullCachePolicy()
        policy.on_append()
        with pytest.raises(OverflowTooLarge):
            policy.select([M], 1, step=1)


class TestDeterminism:
    @pytest.mark.parametrize("kind", list(PolicyKind))
    def test_identical_rows_identical_decisions(self, kind):
        cfg = PolicyConfig(kind=kind).resolved(8)
        rng_rows = []
        rng = np.random.default_rng(5)
        for step in range(1, 25):
            dec = rng.random(step) + 1e-3
            rng_rows.append(0.8 * dec / dec.sum())

        def drive():
            policy = make_policy(cfg)
            decisions = []
            positions = []
            for step, dec in enumerate(rng_rows, start=1):
                positions.append(M + step - 1)
                live = dec[: len(positions)]
                policy.on_append()
                feed(policy, live, step)
                budget = cfg.decode_budget
                overflow = 0 if budget is None else max(0, len(positions) - budget)
                decision = policy.select(positions, overflow, step)
                policy.on_evict(decision.victim_indices)
                decisions.append(decision.victim_indices)
                positions = [
                    p for i, p in enumerate(positions)
                    if i not in set(decision.victim_indices)
                ]
            return decisions

        assert drive() == drive()


class TestPolicyConfig:
    def test_alpha_range_enforced(self):
        with pytest.raises(ValueError):
            PolicyConfig(kind=PolicyKind.MOMENT_KV, momentum_alpha=1.2)

    def test_alpha_one_is_allowed(self):
        cfg = PolicyConfig(kind=PolicyKind.MOMENT_KV, momentum_alpha=1.0)
        assert cfg.momentum_alpha == 1.0

    def test_defaults_follow_budget(self):
        cfg = PolicyConfig(kind=PolicyKind.H2O).resolved(64)
        assert cfg.recency_window == 8
        cfg = PolicyConfig(kind=PolicyKind.SCOPE_SLIDE).resolved(64)
        assert cfg.heavy_keep == 32

    def test_round_trips_through_dict(self):
        cfg = PolicyConfig(kind=PolicyKind.MOMENT_KV, momentum_alpha=0.5, decode_budget=32)
        assert PolicyConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_fields_rejected(self):
        with pytest.raises(ValueError):
            PolicyConfig.from_dict({"kind": "momentkv", "nope": 1})


class TestAttentionRowValidation:
    def test_normalized_row_passes(self):
        validate_attention_row(AttentionRow(np.full(4, 0.25), 1, 2))

    def test_bad_sum_rejected(self):
        with pytest.raises(NormalizationViolation):
            validate_attention_row(AttentionRow(np.full(4, 0.3), 1, 2))

    def test_negative_weight_rejected(self):
        with pytest.raises(NormalizationViolation):
            validate_attention_row(AttentionRow(np.array([1.2, -0.2]), 1, 1))
