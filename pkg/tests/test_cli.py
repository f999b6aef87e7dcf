import json
import subprocess
import sys

from stageflow.cli import main
from stageflow.harness.config import bundled_config


def gen(tmp_path, template="single_shot_patch", n=20, **extra):
    out = tmp_path / f"{template}.jsonl"
    args = ["gen-trace", "--template", template, "-n", str(n), "--out", str(out)]
    for k, v in extra.items():
        args += [f"--{k}", str(v)]
    assert main(args) == 0
    return out


def test_gen_trace_and_run_summary(tmp_path, capsys):
    trace = gen(tmp_path, simple=8, rate=20)
    assert len(trace.read_text().splitlines()) == 20
    assert main(["run", "--trace", str(trace), "--config", str(bundled_config("mapped"))]) == 0
    out = capsys.readouterr().out
    assert "8 light / 12 heavy" in out


def test_run_jsonl_and_csv(tmp_path):
    trace = gen(tmp_path)
    cfg = str(bundled_config("single_heavy"))
    assert main(["run", "--trace", str(trace), "--config", cfg, "--format", "jsonl", "--out",
                 str(tmp_path / "r.jsonl")]) == 0
    first = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert first["type"] == "summary" and first["workflows"] == 20
    assert main(["run", "--trace", str(trace), "--config", cfg, "--format", "csv", "--out",
                 str(tmp_path / "csv")]) == 0
    assert (tmp_path / "csv" / "cdf.csv").exists()


def test_compare_prints_deltas(tmp_path, capsys):
    trace = gen(tmp_path, template="math_chain_k", n=2)
    rc = main(["compare", "--trace", str(trace), str(bundled_config("flush_per_request")),
               str(bundled_config("flush_per_workflow"))])
    assert rc == 0
    out = capsys.readouterr().out
    rows = {line.split()[0]: line.split()[1:] for line in out.splitlines() if line.strip()}
    assert float(rows["ttft_p50_ms"][1]) < float(rows["ttft_p50_ms"][0])


def test_validate(tmp_path, capsys):
    trace = gen(tmp_path, n=3)
    good = [str(bundled_config(n)) for n in ("example", "mapped", "customer_support")]
    assert main(["validate", *good, "--trace", str(trace)]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("backends: {h: {model: m}}\nmapper: {kind: magic}\n")
    assert main(["validate", str(bad)]) == 1
    assert "unknown mapper kind" in capsys.readouterr().out


def test_missing_files_exit_2(tmp_path, capsys):
    rc = main(["run", "--trace", str(tmp_path / "none.jsonl"), "--config", str(bundled_config("mapped"))])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_bad_trace_exit_2(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    trace.write_text('{"workflow_template": "single_shot_patch"}\n{oops\n')
    assert main(["run", "--trace", str(trace), "--config", str(bundled_config("mapped"))]) == 2
    assert "line 2" in capsys.readouterr().err


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "stageflow.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "compare", "validate", "gen-trace", "serve-sim"):
        assert cmd in out.stdout
