import csv
import json

import pytest

from rtqm.cli import main, parse_seeds, UsageError

SHORT = ["--override", "duration_ms=2500", "--override", "sources.1.first_ms=800",
         "--param", "pages=1"]


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_seeds():
    assert parse_seeds("1-5") == [1, 2, 3, 4, 5]
    assert parse_seeds("3,1") == [3, 1]
    for bad in ["", "5-1", "x"]:
        with pytest.raises(UsageError):
            parse_seeds(bad)


def test_analyze_writes_one_row_per_policy(tmp_path, capsys):
    params = tmp_path / "p.txt"
    params.write_text("# model\nk=0.001\ntau=40\nq0=10\nN=9\n")
    out = tmp_path / "a.csv"
    assert main(["analyze", str(params), "--out", str(out)]) == 0
    got = rows(out)
    assert [r["policy"] for r in got] == ["FQ", "FIFO", "CBQ", "CONFUCIUS"]
    assert list(got[0]) == ["policy", "q_max_closed_ms", "q_max_integrated_ms", "fct_delta_ms", "bound_flag"]
    assert "CONFUCIUS" in capsys.readouterr().out


def test_run_writes_outputs_and_reruns_from_invocation(tmp_path):
    out = tmp_path / "r1"
    assert main(["run", "--template", "website_compete", *SHORT, "--out", str(out)]) == 0
    for name in ("report.json", "frames.csv", "flows.csv", "rates.csv", "invocation.json"):
        assert (out / name).exists(), name
    out2 = tmp_path / "r2"
    assert main(["run", str(out / "invocation.json"), "--out", str(out2)]) == 0
    assert (out / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    assert (out / "frames.csv").read_bytes() == (out2 / "frames.csv").read_bytes()


def test_override_changes_the_scheduler(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--template", "website_compete", *SHORT, "--out", str(a)])
    main(["run", "--template", "website_compete", *SHORT, "--override", "scheduler=fifo", "--out", str(b)])
    ra, rb = (json.loads((d / "report.json").read_text()) for d in (a, b))
    assert ra["scheduler"] == "confucius" and rb["scheduler"] == "fifo"


def test_missing_trace_exits_2_naming_the_path(tmp_path, capsys):
    sc = {"hops": [{"trace": "missing_bw.csv", "managed": True}],
          "sources": [{"type": "video", "id": "rt"}]}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(sc))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "missing_bw.csv" in capsys.readouterr().err


def test_bad_override_and_missing_file_exit_2(tmp_path):
    assert main(["run", "--template", "website_compete", "--override", "nokey=1"]) == 2
    assert main(["run", str(tmp_path / "none.json")]) == 2


def test_compare_three_schedulers_twenty_seeds(tmp_path):
    out = tmp_path / "cmp"
    code = main(["compare", "--template", "website_compete", *SHORT,
                 "--schedulers", "confucius,fq,fifo", "--seeds", "1-20", "--out", str(out)])
    assert code == 0
    got = rows(out / "comparison.csv")
    per_run = [r for r in got if r["seed"] != "mean"]
    means = {r["scheduler"]: r for r in got if r["seed"] == "mean"}
    assert len(per_run) == 60
    assert list(means) == ["confucius", "fq", "fifo"]
    for sched, m in means.items():
        stalls = [float(r["stall_ms"]) for r in per_run if r["scheduler"] == sched]
        assert float(m["stall_ms"]) == pytest.approx(sum(stalls) / 20, rel=1e-3, abs=1e-3)
    assert (out / "invocation.json").exists()


def test_compare_with_no_schedulers_is_a_usage_error(tmp_path, capsys):
    assert main(["compare", "--template", "website_compete", "--schedulers", " , ",
                 "--out", str(tmp_path)]) == 2
    assert "scheduler" in capsys.readouterr().err


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RTQM_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--template", "website_compete", *SHORT]) == 0
    made = list((tmp_path / "root").iterdir())
    assert len(made) == 1 and (made[0] / "report.json").exists()


def test_sweep_writes_summary(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "sweep_n", "--override", "duration_ms=1500", "--param", "page_ms=500",
                 "--out", str(out)]) == 0
    got = rows(out / "summary.csv")
    assert len(got) == 7


def test_validate_only_prints_that_row(capsys):
    assert main(["validate", "--only", "3"]) == 1
    lines = capsys.readouterr().out.strip().splitlines()
    body = [ln for ln in lines[1:-1]]
    assert len(body) == 1 and body[0].split()[0] == "3"


@pytest.mark.slow
def test_validate_fast_reclassification_breaks_flat_stalls(capsys):
    # with lambda = 10/ms new flows reach full weight at once, so Confucius degenerates to FQ
    assert main(["validate", "--only", "4", "--set", "lambda=10"]) == 1
    out = capsys.readouterr().out
    row = [ln for ln in out.splitlines() if ln.strip().startswith("4 ")][0]
    assert "FAIL" in row


def test_validate_rejects_unknown_setting_and_check():
    assert main(["validate", "--only", "99"]) == 2
    assert main(["validate", "--only", "3", "--set", "nonsense=1"]) == 2
