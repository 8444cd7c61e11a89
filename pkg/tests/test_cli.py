"""Command-line surface: run configs, report files, exit codes."""

import csv
import json

from momentkv.cli import main
from momentkv.trace import gen_heavy_hitter_trace, write_trace


def write_config(path, **overrides):
    cfg = {
        "mode": "closed_loop",
        "model": {"d_model": 32, "n_heads": 4, "n_layers": 2, "vocab_size": 64, "seed": 3},
        "prompt_len": 6,
        "steps": 24,
        "seed": 3,
        "budgets": [8],
        "policies": [
            {"kind": "full_cache"},
            {"kind": "momentkv", "momentum_alpha": 0.9},
        ],
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def make_dip_trace(path, steps=90):
    start = min(30, steps // 2)
    length = min(20, steps - start)
    trace = gen_heavy_hitter_trace(
        8, steps, [(8, 0.5)], dips=[(8, start, length)], seed=6,
        position_noise=0.0, step_noise=0.0,
    )
    write_trace(trace, path)
    return trace


class TestSimulateClosedLoop:
    def test_writes_all_report_files(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, out=str(tmp_path / "reports"), run_id="demo")
        assert main(["simulate", "--config", str(cfg_path)]) == 0
        outdir = tmp_path / "reports" / "demo"
        for name in ("report.json", "steps.csv", "cdf.csv", "timing.csv", "config.echo"):
            assert (outdir / name).exists()
        echo = json.loads((outdir / "config.echo").read_text())
        assert echo["budgets"] == [8]
        assert echo["model"]["d_ff"] == 128  # defaults resolved into the echo

    def test_budget_never_exceeded_in_steps_csv(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, out=str(tmp_path / "r"), run_id="bound", steps=30)
        assert main(["simulate", "--config", str(cfg_path)]) == 0
        rows = read_csv(tmp_path / "r" / "bound" / "steps.csv")
        momentum = [r for r in rows if r["policy"].startswith("momentkv")]
        assert momentum
        assert all(int(r["cache_total"]) <= 6 + 8 for r in momentum)

    def test_flag_overrides_beat_config(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, out=str(tmp_path / "r"))
        assert main([
            "simulate", "--config", str(cfg_path), "--budget", "4",
            "--run-id", "flagged", "--steps", "12",
        ]) == 0
        echo = json.loads((tmp_path / "r" / "flagged" / "config.echo").read_text())
        assert echo["budgets"] == [4]
        assert echo["steps"] == 12


class TestReplayMode:
    def test_replay_on_synthetic_trace(self, tmp_path):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path)
        cfg_path = tmp_path / "run.json"
        write_config(
            cfg_path, mode="replay", trace=str(trace_path),
            out=str(tmp_path / "r"), run_id="rp",
            policies=[{"kind": "momentkv", "momentum_alpha": 0.9}],
        )
        assert main(["replay", "--config", str(cfg_path)]) == 0
        report = json.loads((tmp_path / "r" / "rp" / "report.json").read_text())
        assert report["mode"] == "replay"
        assert report["reports"][0]["max_total_size"] <= 8 + 8
        meta = report["reports"][0]["meta"]
        assert meta["heavy_hitter_retention"] == 1.0  # labeled dip trace
        assert 0.0 <= meta["oracle_agreement"] <= 1.0

    def test_missing_trace_file_fails_loudly(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, mode="replay", trace=str(tmp_path / "absent.attrc"),
                     out=str(tmp_path / "r"))
        assert main(["replay", "--config", str(cfg_path)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_truncated_trace_fails_loudly(self, tmp_path, capsys):
        trace_path = tmp_path / "cut.attrc"
        make_dip_trace(trace_path)
        trace_path.write_bytes(trace_path.read_bytes()[:-10])
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, mode="replay", trace=str(trace_path),
                     out=str(tmp_path / "r"))
        assert main(["replay", "--config", str(cfg_path)]) == 1
        assert "TruncatedTrace" in capsys.readouterr().err


class TestGenTrace:
    def test_heavy_hitter_file_and_summary(self, tmp_path, capsys):
        out = tmp_path / "hh.attrc"
        code = main([
            "gen-trace", "--kind", "heavy-hitter", "--out", str(out),
            "--prefill-len", "4", "--steps", "16", "--seed", "1",
            "--hitter", "2:0.4", "--hitter", "5:0.2", "--dip", "5:4:6",
        ])
        assert code == 0
        assert out.exists()
        printed = capsys.readouterr().out
        assert "prefill_len=4" in printed and "steps=16" in printed

    def test_invalid_dip_window_fails(self, tmp_path, capsys):
        code = main([
            "gen-trace", "--kind", "heavy-hitter", "--out", str(tmp_path / "x.attrc"),
            "--prefill-len", "4", "--steps", "10",
            "--hitter", "2:0.4", "--dip", "2:9:5",
        ])
        assert code == 1
        assert "InvalidDipWindow" in capsys.readouterr().err

    def test_same_seed_same_bytes(self, tmp_path):
        args = ["gen-trace", "--kind", "recency-burst", "--prefill-len", "4",
                "--steps", "32", "--seed", "7", "--concentration", "0.2"]
        a, b = tmp_path / "a.attrc", tmp_path / "b.attrc"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestSweepAlpha:
    def test_retention_nondecreasing_in_alpha(self, tmp_path):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path)
        cfg_path = tmp_path / "run.json"
        write_config(
            cfg_path, mode="replay", trace=str(trace_path),
            out=str(tmp_path / "r"), run_id="sweep", budgets=[16],
            policies=[{"kind": "momentkv"}],
        )
        assert main([
            "sweep-alpha", "--config", str(cfg_path),
            "--alpha", "0.0", "--alpha", "0.5", "--alpha", "0.9", "--alpha", "0.98",
        ]) == 0
        rows = read_csv(tmp_path / "r" / "sweep" / "sweep.csv")
        retention = [float(r["hitter_retention"]) for r in rows]
        assert retention == sorted(retention)
        assert retention[0] == 0.0 and retention[-1] == 1.0

    def test_single_alpha_gives_one_row(self, tmp_path):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path, steps=40)
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, mode="replay", trace=str(trace_path),
                     out=str(tmp_path / "r"), run_id="one", budgets=[16],
                     policies=[{"kind": "momentkv"}])
        assert main(["sweep-alpha", "--config", str(cfg_path), "--alpha", "0.9"]) == 0
        rows = read_csv(tmp_path / "r" / "one" / "sweep.csv")
        assert len(rows) == 1

    def test_alpha_one_flagged_h2o_equivalent(self, tmp_path, capsys):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path, steps=40)
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, mode="replay", trace=str(trace_path),
                     out=str(tmp_path / "r"), run_id="h2oeq", budgets=[16],
                     policies=[{"kind": "momentkv"}])
        assert main(["sweep-alpha", "--config", str(cfg_path), "--alpha", "1.0"]) == 0
        rows = read_csv(tmp_path / "r" / "h2oeq" / "sweep.csv")
        assert rows[0]["h2o_equivalent"] == "True"
        assert "h2o-equivalent" in capsys.readouterr().out

    def test_requires_momentkv_policy(self, tmp_path, capsys):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path, steps=40)
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, mode="replay", trace=str(trace_path),
                     out=str(tmp_path / "r"), policies=[{"kind": "full_cache"}])
        assert main(["sweep-alpha", "--config", str(cfg_path), "--alpha", "0.5"]) == 1


class TestBench:
    def test_timing_table_with_scaling_row(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, out=str(tmp_path / "r"), run_id="bench",
                     steps=20, budgets=[4, 8])
        assert main(["bench", "--config", str(cfg_path)]) == 0
        printed = capsys.readouterr().out
        assert "scaling ratio" in printed
        with open(tmp_path / "r" / "bench" / "timing.csv") as fh:
            content = fh.read()
        assert "scaling_ratio_max_vs_min" in content
        assert "momentkv(alpha=0.9)" in content

    def test_replay_config_rejected(self, tmp_path, capsys):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path, steps=40)
        cfg_path = tmp_path / "run.json"
        write_config(cfg_path, mode="replay", trace=str(trace_path),
                     out=str(tmp_path / "r"))
        assert main(["bench", "--config", str(cfg_path)]) == 1
        assert "closed_loop" in capsys.readouterr().err


class TestWorkerPool:
    def test_threaded_runs_match_sequential(self, tmp_path, monkeypatch):
        trace_path = tmp_path / "dip.attrc"
        make_dip_trace(trace_path)
        cfg_path = tmp_path / "run.json"
        write_config(
            cfg_path, mode="replay", trace=str(trace_path),
            out=str(tmp_path / "r"), budgets=[8, 16],
            policies=[{"kind": "momentkv", "momentum_alpha": 0.9},
                      {"kind": "streaming_sink", "sink_size": 2}],
        )
        monkeypatch.setenv("MOMENTKV_THREADS", "1")
        assert main(["replay", "--config", str(cfg_path), "--run-id", "seq"]) == 0
        monkeypatch.setenv("MOMENTKV_THREADS", "4")
        assert main(["replay", "--config", str(cfg_path), "--run-id", "par"]) == 0
        seq = read_csv(tmp_path / "r" / "seq" / "steps.csv")
        par = read_csv(tmp_path / "r" / "par" / "steps.csv")
        strip = lambda rows: [
            {k: v for k, v in row.items() if not k.endswith("_ns")} for row in rows
        ]
        assert strip(seq) == strip(par)
