import csv
import json

import pytest

from addd import cli


def rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def first_line(path):
    with open(path, encoding="utf-8") as fh:
        return fh.readline()


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["generate", "--scenario", "hanoi-sce1", "--out", "x", "--bogus"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2


def test_validation_failure_exits_1(tmp_path, capsys):
    assert cli.main(["run", "--stream", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
    assert "addd: error" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert cli.main(["generate", "--config", str(cfg), "--scenario", "hanoi-sce1", "--out", "x"]) == 1


def test_generate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["generate", "--scenario", "hanoi-sce1", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    for f in ("stream.csv", "truth.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert first_line(tmp_path / "a" / "stream.csv") == (
        "# addd 0.1.0 scenario=hanoi-sce1 seed=7 network=hanoi events=all\n"
    )
    r = rows(tmp_path / "a" / "stream.csv")
    assert len(r) == 2 * 8640 * 5 and r[0]["t"] == "-8640"


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "zj-sce3", "seed": 3, "out": str(tmp_path / "cfg"),
                               "events": "none"}))
    assert cli.main(["generate", "--config", str(cfg)]) == 0
    assert "scenario=zj-sce3 seed=3" in first_line(tmp_path / "cfg" / "stream.csv")
    # flags beat the file
    assert cli.main(["generate", "--config", str(cfg), "--seed", "4"]) == 0
    assert "seed=4 network=zj events=none" in first_line(tmp_path / "cfg" / "stream.csv")
    args = cli.parse_args(["run", "--stream", "s", "--out", "o"])
    assert args.epochs == 100 and args.patience == 96 and args.mode == "inprocess"


def test_no_event_run_and_evaluate(tmp_path):
    gen, run, ev = tmp_path / "gen", tmp_path / "run", tmp_path / "ev"
    assert cli.main(["generate", "--scenario", "hanoi-sce1", "--seed", "2", "--events", "none",
                     "--out", str(gen)]) == 0
    assert cli.main(["run", "--stream", str(gen / "stream.csv"), "--epochs", "20", "--out", str(run)]) == 0
    assert first_line(run / "predictions.csv") == "# addd 0.1.0 scenario=hanoi-sce1 seed=2\n"
    assert cli.main(["evaluate", "--predictions", str(run / "predictions.csv"),
                     "--labels", str(gen / "stream.csv"), "--regions", str(run / "regions.csv"),
                     "--truth", str(gen / "truth.csv"), "--out", str(ev)]) == 0
    summary = rows(ev / "summary.csv")
    assert len(summary) == 5
    for r in summary:
        assert int(r["tp"]) == int(r["fn"]) == 0
        assert int(r["fp"]) / (int(r["fp"]) + int(r["tn"])) < 0.05
    assert len(rows(ev / "gmean.csv")) == 8640 * 5
    loc_row = rows(ev / "localization.csv")[0]
    assert int(loc_row["evaluated_steps"]) == 0


def test_repeat_and_report(tmp_path):
    out = tmp_path / "rep"
    assert cli.main(["repeat", "--scenario", "hanoi-sce1", "--n", "2", "--base-seed", "5",
                     "--epochs", "2", "--out", str(out)]) == 0
    r = rows(out / "repeat.csv")
    assert list(r[0]) == ["t", "sensor_id", "gmean_mean", "gmean_stderr"]
    assert len(r) == 8640 * 5
    seeds = {x["seed"] for x in rows(out / "repeat_summary.csv")}
    assert seeds == {"5", "6"}
    merged = tmp_path / "merged.csv"
    assert cli.main(["report", "--inputs", str(out / "repeat.csv"), "--names", "ours",
                     "--out", str(merged)]) == 0
    m = rows(merged)
    assert len(m) == 8640 and "ours_N7_mean" in m[0] and "ours_N7_stderr" in m[0]
    assert cli.main(["report", "--inputs", str(out / "repeat.csv"), "--names", "a", "b",
                     "--out", str(merged)]) == 1
