import io
import json
import math
import os
import random

import pytest

from blockclique.chain import ProtocolParams, make_genesis, write_trace
from blockclique.cli import canonical_json, main

from dag_gen import random_instance


def run(argv):
    return main(argv)


class TestCanonicalJson:
    def test_sorted_keys_and_float_format(self):
        s = canonical_json({"b": 1.0 / 3.0, "a": 1, "c": [True, None, "x"]})
        assert s == '{"a":1,"b":0.333333333333,"c":[true,null,"x"]}'

    def test_non_finite_becomes_null(self):
        assert canonical_json({"x": math.inf}) == '{"x":null}'

    def test_twelve_significant_digits(self):
        assert canonical_json(123456.789012345) == "123456.789012"


class TestSimulateCommand:
    def test_toy_config_runs_and_writes_outputs(self, tmp_path, capsys):
        code = run(["simulate", "--config", "configs/toy.json",
                    "--out", str(tmp_path), "--blocks"])
        assert code == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["stale_rate"] == 0.0
        assert metrics["manifest"] == "manifest.json"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert "metrics.json" in manifest["outputs"]
        assert "blocks.csv" in manifest["outputs"]
        header = (tmp_path / "blocks.csv").read_text().splitlines()[0]
        assert header.startswith("id,thread,period,created")

    def test_overrides_and_determinism(self, tmp_path):
        args = ["simulate", "--override", "N=8", "T=2", "t0=4", "S_B=100000",
                "F=4", "duration=120", "--seed", "5"]
        assert run(args + ["--out", str(tmp_path / "a")]) == 0
        assert run(args + ["--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "metrics.json").read_bytes()
        b = (tmp_path / "b" / "metrics.json").read_bytes()
        assert a == b

    def test_malformed_config_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_override_exit_2(self, tmp_path):
        assert run(["simulate", "--override", "nonsense=1",
                    "--out", str(tmp_path)]) == 2


class TestAttackCommand:
    def test_reference_point(self, capsys):
        assert run(["attack", "--beta", "0.45", "--mu", "0.01",
                    "--F", "64", "--E", "0"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert 0.5e-6 < rec["p_success"] < 2e-6

    def test_duration_flag(self, capsys):
        assert run(["attack", "--beta", "0.5", "--mu", "0.1",
                    "--F", "64", "--E", "8", "--duration"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["mean_slots"] == pytest.approx(410, rel=0.05)

    def test_threshold_mode(self, capsys):
        assert run(["attack", "--threshold", "--mu", "0.01"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert round(rec["beta_star"], 3) == 0.497

    def test_closed_form_domain_error_exit_2(self, capsys):
        assert run(["attack", "--beta", "0.3", "--F", "8", "--E", "2",
                    "--closed-form"]) == 2
        assert "domain error" in capsys.readouterr().err

    def test_sweep_csv(self, capsys):
        assert run(["attack", "--mu", "0.01", "--F", "8", "--E", "0", "--beta", "0.1",
                    "--sweep", "beta=0.05:0.45:0.05"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("beta,mu,gamma")
        assert len(lines) == 10  # header + 9 sweep points
        betas = [float(l.split(",")[0]) for l in lines[1:]]
        assert betas == pytest.approx([0.05 * i for i in range(1, 10)])

    def test_missing_beta_exit_2(self, capsys):
        assert run(["attack", "--mu", "0.01"]) == 2


class TestReplayCommand:
    def _write_trace(self, path, params, blocks):
        with open(path, "w") as fp:
            write_trace([make_genesis(t) for t in range(params.thread_count)], fp)
            write_trace(blocks, fp)

    def test_replay_outputs_statuses(self, tmp_path, capsys):
        rng = random.Random(4)
        params, blocks = random_instance(rng, max_blocks=12)
        trace = tmp_path / "trace.jsonl"
        self._write_trace(trace, params, blocks)
        code = run(["replay", "--trace", str(trace),
                    "--override", f"T={params.thread_count}",
                    f"F={params.finality}", f"E={params.endorsement_slots}",
                    "t0=4", "S_B=10000"])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == len(blocks)
        statuses = {json.loads(l)["status"] for l in out}
        assert statuses <= {"active", "final", "stale"}

    def test_replay_deterministic_bytes(self, tmp_path, capsys):
        rng = random.Random(11)
        params, blocks = random_instance(rng, max_blocks=12)
        trace = tmp_path / "trace.jsonl"
        self._write_trace(trace, params, blocks)
        argv = ["replay", "--trace", str(trace),
                "--override", f"T={params.thread_count}", f"F={params.finality}",
                f"E={params.endorsement_slots}", "t0=4", "S_B=10000"]
        assert run(argv) == 0
        first = capsys.readouterr().out
        assert run(argv) == 0
        assert capsys.readouterr().out == first

    def test_empty_trace_ok(self, tmp_path, capsys):
        trace = tmp_path / "empty.jsonl"
        trace.write_text("")
        assert run(["replay", "--trace", str(trace)]) == 0
        assert capsys.readouterr().out == ""

    def test_malformed_trace_exit_2(self, tmp_path, capsys):
        trace = tmp_path / "junk.jsonl"
        trace.write_text("this is not json\n")
        assert run(["replay", "--trace", str(trace)]) == 2

    def test_structural_violation_exit_4(self, tmp_path, capsys):
        p = ProtocolParams(thread_count=2, slot_interval=4.0, max_block_size=1000,
                           finality=3, endorsement_slots=0)
        from blockclique.chain import Block, Slot
        g = [make_genesis(t) for t in range(2)]
        too_big = Block(slot=Slot(0, 1), creator=1,
                        parents=(g[0].id, g[1].id), size_bits=5000)
        trace = tmp_path / "trace.jsonl"
        self._write_trace(trace, p, [too_big])
        code = run(["replay", "--trace", str(trace),
                    "--override", "T=2", "F=3", "E=0", "t0=4", "S_B=1000"])
        assert code == 4
        captured = capsys.readouterr()
        assert "structural violation" in captured.err
        assert json.loads(captured.out.splitlines()[0])["status"] == "invalid"

    def test_unresolved_cycle_attempt(self, tmp_path, capsys):
        p = ProtocolParams(thread_count=2, slot_interval=4.0, max_block_size=10_000,
                           finality=3, endorsement_slots=0)
        from blockclique.chain import Block, Slot
        g = [make_genesis(t) for t in range(2)]
        orphan = Block(slot=Slot(0, 1), creator=1,
                       parents=(bytes(31) + b"\x99", g[1].id), size_bits=100)
        trace = tmp_path / "trace.jsonl"
        self._write_trace(trace, p, [orphan])
        assert run(["replay", "--trace", str(trace), "--override", "T=2",
                    "F=3", "E=0", "t0=4", "S_B=10000"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert json.loads(out[-1])["status"] == "unresolved"
