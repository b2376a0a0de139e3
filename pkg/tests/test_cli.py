import csv
import io
import json
import subprocess
import sys

import pytest

from rtp.cli import main

GOLDEN_MEMTABLE = """\
strategy,N,W,G,A,A_p,activation_mem,param_mem,duplication
NoParallelism,8,4,4,2,1,2,8,0
TensorParallel,8,4,4,2,1,16,8,14
DataParallel,8,4,4,2,1,2,64,56
PipelineParallel,8,4,4,2,1,10,8,8
FSDP,8,4,4,2,1,2,36,28
RTP,8,4,4,2,1,2,12,4
RTPInplace,8,4,4,2,1,2,8,0
"""


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_memtable_golden(capsys):
    code, out, _ = run(capsys, "memtable", "--W", "4", "--G", "4", "--A", "2", "--Ap", "1", "--workers", "8")
    assert code == 0 and out == GOLDEN_MEMTABLE


def test_memtable_n1_has_no_duplication_except_rtp_buffer(capsys):
    code, out, _ = run(capsys, "memtable", "--W", "4", "--G", "4", "--A", "2", "--Ap", "1", "--workers", "1")
    dup = {r["strategy"]: int(r["duplication"]) for r in rows(out)}
    assert code == 0
    assert all(v == 0 for k, v in dup.items() if k not in ("RTP", "PipelineParallel"))


def test_memtable_from_config_uses_parameter_count(capsys):
    from rtp.analysis.instrumented import model_bytes
    from rtp.config import TOY_PRESETS

    code, out, _ = run(capsys, "memtable", "--preset", "toy-gpt", "--workers", "4")
    assert code == 0
    assert {int(r["W"]) for r in rows(out)} == {model_bytes(TOY_PRESETS["toy-gpt"])}


def test_memtable_partial_literals_is_config_error(capsys):
    code, _, err = run(capsys, "memtable", "--W", "4")
    assert code == 2 and "--Ap" in err


def test_full_size_preset_memtable(capsys):
    code, out, _ = run(capsys, "memtable", "--preset", "gpt2-117m", "--workers", "8")
    assert code == 0 and len(rows(out)) == 7


@pytest.mark.parametrize("n", [1, 4])
def test_verify_pass(capsys, n):
    code, out, _ = run(capsys, "verify", "--workers", str(n), "--samples", "6")
    report = json.loads(out)
    assert code == 0 and report["status"] == "PASS"
    assert all(c["pass"] for c in report["checks"]) and report["gradcheck"]["pass"]


def test_verify_corrupt_shard_fails(capsys):
    code, out, _ = run(capsys, "verify", "--workers", "2", "--samples", "0", "--corrupt-shard")
    report = json.loads(out)
    assert code == 1 and report["status"] == "FAIL" and "shard-id" in report["error"]


def test_indivisible_workers_is_config_error(capsys):
    code, _, err = run(capsys, "verify", "--workers", "3")
    assert code == 2 and "divisible" in err


def test_bad_config_file(capsys, tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[1, 2]")
    code, _, err = run(capsys, "ledger", "--config", str(p))
    assert code == 2
    p.write_text('{"n_workers": 2, "nonsense": 1}')
    code, _, err = run(capsys, "ledger", "--config", str(p))
    assert code == 2 and "nonsense" in err


def test_config_file_and_flag_override(capsys, tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"n_workers": 2, "batch_size": 4, "seed": 3}))
    code, out, _ = run(capsys, "ledger", "--config", str(p))
    assert code == 0 and {r["N"] for r in rows(out) if r["strategy"] != "serial"} == {"2"}
    code, out, _ = run(capsys, "ledger", "--config", str(p), "--workers", "4")
    assert code == 0 and {r["N"] for r in rows(out) if r["strategy"] != "serial"} == {"4"}


def test_ledger_duplication(capsys):
    code, out, _ = run(capsys, "ledger", "--workers", "4", "--batch", "4")
    assert code == 0
    by = {(r["strategy"], r["category"]): r for r in rows(out)}
    assert int(by[("rtp-inplace", "Param+Grad")]["duplication"]) == 0
    assert int(by[("serial", "Total")]["duplication"]) == 0
    assert int(by[("rtp-outofplace", "CommBuffer")]["peak_bytes"]) > 0


def test_timeline_summary(capsys, tmp_path):
    out_csv = tmp_path / "t.csv"
    code, out, _ = run(capsys, "timeline", "--workers", "4", "--out", str(out_csv))
    summary = json.loads(out)
    assert code == 0
    assert summary["RTP-outofplace"]["startup_latency"] == 0 < summary["FSDP"]["startup_latency"]
    assert summary["RTP-inplace"]["makespan"] >= summary["RTP-outofplace"]["makespan"]
    header = out_csv.read_text().splitlines()[0]
    assert header == "schedule,worker,stream,label,start,end"


def test_sweep_is_collinear(capsys):
    code, out, _ = run(capsys, "sweep", "--workers", "2", "--batches", "1,2,3")
    assert code == 0
    r = rows(out)
    assert {x["strategy"] for x in r} == {"rtp-inplace", "rtp-outofplace"} and len(r) == 6


def test_sweep_bad_batches(capsys):
    assert run(capsys, "sweep", "--batches", "1,x")[0] == 2
    assert run(capsys, "sweep", "--batches", "0")[0] == 2


@pytest.mark.parametrize("cmd", ["ledger", "sweep", "timeline"])
def test_transports_give_identical_csv(capsys, cmd):
    outs = []
    for transport in ("lockstep", "concurrent", "lockstep"):
        code, out, _ = run(capsys, cmd, "--workers", "2", "--batch", "2", "--batches", "1,2,3",
                           "--transport", transport) if cmd == "sweep" else \
            run(capsys, cmd, "--workers", "2", "--batch", "2", "--transport", transport)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1] == outs[2]


def test_seed_environment_fallback(capsys, monkeypatch):
    monkeypatch.setenv("RTP_SIM_SEED", "7")
    a = run(capsys, "verify", "--workers", "2", "--samples", "0")[1]
    b = run(capsys, "verify", "--workers", "2", "--samples", "0", "--seed", "7")[1]
    assert json.loads(a)["config"]["seed"] == 7 and a == b
    monkeypatch.setenv("RTP_SIM_SEED", "not-a-number")
    assert run(capsys, "verify", "--workers", "2")[0] == 2


def test_seed_range_checked(capsys):
    assert run(capsys, "verify", "--seed", str(1 << 64))[0] == 2


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "rtp", "memtable", "--W", "4", "--G", "4", "--A", "2", "--Ap", "1",
         "--workers", "8"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0 and proc.stdout == GOLDEN_MEMTABLE
