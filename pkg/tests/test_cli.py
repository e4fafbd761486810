import csv
import json

import numpy as np
import pytest

from fhe_er import cli
from fhe_er.synth import PopulationSpec, generate_population


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    for argv in (["keygen", "-w", ws, "--ring-degree", 4096, "--levels", 31, "--seed", 5],
                 ["policy", "-w", ws, "--n-identities", 40, "--seed", 1]):
        assert cli.main([str(a) for a in argv]) == 0
    pop = generate_population(PopulationSpec(n_identities=4, seed=3))
    files = {}
    for i in range(len(pop)):
        if pop.record[i] < 2:
            for name, vec in (("bm", pop.bm[i]), ("bg", pop.bg[i])):
                p = ws / f"{name}{pop.identity[i]}_{pop.record[i]}.csv"
                p.write_text(",".join(repr(float(v)) for v in vec))
                files[name, pop.identity[i], pop.record[i]] = p
    return ws, files


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0
    assert "output schema 1" in capsys.readouterr().out


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit):
        cli.main(["verify", "--help"])
    assert "exit codes" in capsys.readouterr().out


def test_keygen_refuses_overwrite_and_is_deterministic(capsys, tmp_path):
    code, out, _ = run(capsys, "keygen", "-w", tmp_path, "--ring-degree", 4096, "--levels", 2,
                       "--seed", 3)
    assert code == 0 and out["self_test_passed"] and out["self_test_max_error"] < 2 ** -20
    code, _, err = run(capsys, "keygen", "-w", tmp_path, "--ring-degree", 4096, "--levels", 2)
    assert code == cli.EXIT_EXISTS and "--force" in err
    code, again, _ = run(capsys, "keygen", "-w", tmp_path, "--ring-degree", 4096, "--levels", 2,
                         "--seed", 3, "--force")
    assert code == 0 and again["params_digest"] == out["params_digest"]


def test_keygen_bad_ring_degree(capsys, tmp_path):
    code, _, err = run(capsys, "keygen", "-w", tmp_path, "--ring-degree", 1000)
    assert code == cli.EXIT_PARAMS and "parameter" in err


def test_enroll_list_verify_identify(capsys, workspace):
    ws, f = workspace
    for i in range(3):
        code, out, _ = run(capsys, "enroll", "-w", ws, "--id", f"p{i}", "--bm-file",
                           f["bm", i, 0], "--bg-file", f["bg", i, 0], "--seed", i,
                           "--self-check")
        assert code == 0 and out["self_check_passed"]
        assert out["self_check_max_error"] < 2 ** -19
    code, out, _ = run(capsys, "list", "-w", ws)
    assert out["ids"] == {m: ["p0", "p1", "p2"] for m in ("biometric", "biographic", "fused")}
    code, _, err = run(capsys, "enroll", "-w", ws, "--id", "p1", "--bm-file", f["bm", 1, 0],
                       "--bg-file", f["bg", 1, 0])
    assert code == cli.EXIT_CONFLICT
    code, out, err = run(capsys, "verify", "-w", ws, "--bm-file", f["bm", 2, 1], "--bg-file",
                         f["bg", 2, 1], "--seed", 1)
    assert code == 0 and [d["entity_id"] for d in out["decisions"]] == ["p0", "p1", "p2"]
    assert [d["accept"] for d in out["decisions"]] == [False, False, True]
    assert "accepted" in err
    code, out, _ = run(capsys, "identify", "-w", ws, "--bm-file", f["bm", 1, 1], "--bg-file",
                       f["bg", 1, 1], "-k", 2)
    assert code == 0 and out["ranked"][0] == "p1" and len(out["ranked"]) == 2


def test_enroll_biographic_record(capsys, workspace, tmp_path):
    ws, f = workspace
    rec = tmp_path / "rec.txt"
    rec.write_text("name=Anne Smith\ncity=Springfield\ndob=1990-01-02\n")
    store = tmp_path / "stores"
    code, out, _ = run(capsys, "enroll", "-w", ws, "--store-dir", store, "--id", "anne",
                       "--bm-file", f["bm", 0, 0], "--bg-record", rec, "--self-check")
    assert code == 0 and out["self_check_passed"]
    bad = tmp_path / "bad.txt"
    bad.write_text("no equals sign here\n")
    code, _, _ = run(capsys, "enroll", "-w", ws, "--store-dir", store, "--id", "x",
                     "--bm-file", f["bm", 0, 0], "--bg-record", bad)
    assert code == cli.EXIT_INPUT


def test_enroll_dimension_mismatch(capsys, workspace, tmp_path):
    ws, f = workspace
    short = tmp_path / "short.csv"
    short.write_text("0.1,0.2,0.3")
    code, _, err = run(capsys, "enroll", "-w", ws, "--store-dir", tmp_path / "s", "--id", "x",
                       "--bm-file", short, "--bg-file", f["bg", 0, 0])
    assert code == cli.EXIT_INPUT and "dimension" in err


def test_verify_empty_store(capsys, workspace, tmp_path):
    ws, f = workspace
    code, out, _ = run(capsys, "verify", "-w", ws, "--store-dir", tmp_path / "none",
                       "--bm-file", f["bm", 0, 0], "--bg-file", f["bg", 0, 0])
    assert code == 0 and out["decisions"] == []


def test_missing_workspace(capsys, tmp_path):
    code, _, err = run(capsys, "list", "-w", tmp_path)
    assert code == 0
    code, _, err = run(capsys, "policy", "-w", tmp_path)
    assert code == cli.EXIT_STORE and "keygen" in err


def test_config_file(capsys, workspace, tmp_path):
    ws, f = workspace
    cfg = tmp_path / "ws.conf"
    cfg.write_text(f"# workspace settings\nworkspace = {ws}\nstores = {tmp_path / 'cs'}\n")
    code, out, _ = run(capsys, "list", "--config", cfg)
    assert code == 0 and out["stores"] == str(tmp_path / "cs")
    cfg.write_text("colour = blue\n")
    code, _, err = run(capsys, "list", "--config", cfg)
    assert code == cli.EXIT_USAGE and "unknown key" in err


def test_bench(capsys, workspace, tmp_path):
    ws, _ = workspace
    out_csv = tmp_path / "t.csv"
    code, out, _ = run(capsys, "bench", "-w", ws, "--threads", "1,2", "--queries", 4,
                       "--gallery", 4, "--unit-size", 2, "--csv", out_csv)
    assert code == 0 and out["decisions_identical"]
    assert [r["threads"] for r in out["runs"]] == [1, 2]
    rows = list(csv.reader(out_csv.open()))
    assert rows[0] == ["threads", "elapsed_ms", "cpu_ms", "pairs", "pairs_per_sec"]
    assert [r[3] for r in rows[1:]] == ["16", "16"]
    code, _, _ = run(capsys, "bench", "-w", ws, "--threads", "0")
    assert code == cli.EXIT_USAGE


def test_eval_plain(capsys, tmp_path):
    code, out, err = run(capsys, "eval", "--n-identities", 25, "--out", tmp_path / "rep")
    assert code == 0 and len(out["arms"]) == 4 and "EER" in err
    eers = {a["arm"]: a["eer"] for a in out["arms"]}
    assert eers["score_fusion"] < min(eers["biometric"], eers["biographic"])
    assert (tmp_path / "rep" / "report.json").exists()
    code, _, _ = run(capsys, "eval", "--spec", "other")
    assert code == cli.EXIT_USAGE
