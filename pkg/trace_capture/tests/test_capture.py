"""Capture runs against a tiny local causal LM, plus the cross-tool contract:
every emitted file must load in the simulator and replay losslessly."""

import pytest

from trace_capture.capture import CaptureConfig, capture_run
from trace_capture.cli import main
from trace_capture.format import validate_attrc

PROMPT_IDS = [3, 17, 5, 99, 42, 7]


def capture(tiny_model_dir, tmp_path, steps=8, **kw):
    out = tmp_path / "capture.attrc"
    config = CaptureConfig(
        model=tiny_model_dir, steps=steps, out=str(out),
        prompt_ids=PROMPT_IDS, **kw,
    )
    return capture_run(config), out


class TestCaptureRun:
    def test_records_one_row_per_step_per_layer(self, tiny_model_dir, tmp_path):
        result, out = capture(tiny_model_dir, tmp_path)
        assert result.steps_recorded == 8
        assert result.prefill_len == len(PROMPT_IDS)
        summary = validate_attrc(out)
        assert summary.n_steps == 8
        assert summary.n_layers == 2
        assert summary.head_averaged is True

    def test_single_step_boundary(self, tiny_model_dir, tmp_path):
        result, out = capture(tiny_model_dir, tmp_path, steps=1)
        assert result.steps_recorded == 1
        assert validate_attrc(out).n_steps == 1

    def test_per_head_capture(self, tiny_model_dir, tmp_path):
        result, out = capture(tiny_model_dir, tmp_path, steps=4, head_average=False)
        summary = validate_attrc(out)
        assert summary.n_heads == 2
        assert summary.head_averaged is False

    def test_layer_subset(self, tiny_model_dir, tmp_path):
        result, out = capture(tiny_model_dir, tmp_path, steps=4, layers=[1])
        assert validate_attrc(out).n_layers == 1

    def test_greedy_capture_is_reproducible(self, tiny_model_dir, tmp_path):
        _, a = capture(tiny_model_dir, tmp_path, steps=6)
        first = a.read_bytes()
        _, b = capture(tiny_model_dir, tmp_path, steps=6)
        assert b.read_bytes() == first

    def test_bad_layer_index(self, tiny_model_dir, tmp_path):
        with pytest.raises(ValueError):
            capture(tiny_model_dir, tmp_path, steps=2, layers=[5])


class TestCli:
    def test_capture_then_validate(self, tiny_model_dir, tmp_path, capsys):
        out = tmp_path / "cli.attrc"
        code = main([
            "capture", "--model", tiny_model_dir, "--steps", "4",
            "--out", str(out), "--prompt-ids", "3,17,5,99",
        ])
        assert code == 0
        assert "steps=4" in capsys.readouterr().out
        assert main(["validate", str(out)]) == 0
        assert "valid trace" in capsys.readouterr().out

    def test_validate_rejects_truncation(self, tiny_model_dir, tmp_path, capsys):
        out = tmp_path / "cli.attrc"
        assert main([
            "capture", "--model", tiny_model_dir, "--steps", "3",
            "--out", str(out), "--prompt-ids", "3,17,5",
        ]) == 0
        capsys.readouterr()
        out.write_bytes(out.read_bytes()[:-4])
        assert main(["validate", str(out)]) == 1
        assert "TruncatedTrace" in capsys.readouterr().err

    def test_missing_model_fails_loudly(self, tmp_path, capsys):
        code = main([
            "capture", "--model", str(tmp_path / "nope"), "--steps", "2",
            "--out", str(tmp_path / "x.attrc"), "--prompt-ids", "1,2",
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestSimulatorContract:
    """Format contract: the simulator accepts and replays captured traces."""

    def test_captured_trace_replays_with_full_retention(self, tiny_model_dir, tmp_path):
        from momentkv.policies import PolicyConfig, PolicyKind
        from momentkv.trace import read_trace, replay

        result, out = capture(tiny_model_dir, tmp_path, steps=8)
        trace = read_trace(out)  # raises on any format or normalization defect
        assert trace.header.prefill_len == len(PROMPT_IDS)
        assert trace.header.n_steps == 8
        for ts in trace.steps:
            assert ts.rows.shape[-1] == len(PROMPT_IDS) + ts.step
        report = replay(trace, PolicyConfig(kind=PolicyKind.FULL_CACHE))
        assert all(r.retained_mass == 1.0 for r in report.records)
        assert all(not r.evicted_positions for r in report.records)

    def test_per_head_capture_is_averaged_on_load(self, tiny_model_dir, tmp_path):
        from momentkv.policies import PolicyConfig, PolicyKind
        from momentkv.trace import read_trace, replay

        _, out = capture(tiny_model_dir, tmp_path, steps=4, head_average=False)
        trace = read_trace(out)
        assert trace.header.n_heads == 2
        averaged = trace.steps[0].averaged(0)
        assert averaged.shape == (len(PROMPT_IDS) + 1,)
        assert abs(float(averaged.sum()) - 1.0) <= 1e-3
        report = replay(
            trace,
            PolicyConfig(kind=PolicyKind.MOMENT_KV, momentum_alpha=0.9, decode_budget=2),
        )
        assert report.max_total_size() <= len(PROMPT_IDS) + 2

    def test_compressed_replay_respects_budget_on_captured_trace(
        self, tiny_model_dir, tmp_path
    ):
        from momentkv.metrics import timing_report
        from momentkv.policies import PolicyConfig, PolicyKind
        from momentkv.trace import read_trace, replay

        _, out = capture(tiny_model_dir, tmp_path, steps=8)
        trace = read_trace(out)
        report = replay(
            trace,
            PolicyConfig(kind=PolicyKind.MOMENT_KV, momentum_alpha=0.98, decode_budget=4),
        )
        assert report.max_total_size() <= len(PROMPT_IDS) + 4
        assert timing_report([report]).entries
