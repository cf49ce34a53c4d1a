import csv
import json
from pathlib import Path

import jsonschema
import pytest

from espark import cli
from espark.llm import API_KEY_ENV
from espark.scenario import dump_scenario, suite_scenario

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "report.schema.json").read_text())
MOCK = Path(__file__).parents[1] / "scenarios" / "mock_script.json"


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    p = tmp_path_factory.mktemp("scen") / "small.toml"
    dump_scenario(suite_scenario("standard", 3, horizon=20), p)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_missing_scenario_is_config_error(tmp_path, capsys):
    code = cli.main(["train", "--scenario", str(tmp_path / "nope.toml"), "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "nope.toml" in capsys.readouterr().err


def test_train_outputs_are_reproducible(scenario, tmp_path):
    for d in ("a", "b"):
        assert cli.main(["train", "--scenario", str(scenario), "--steps", "800", "--out", str(tmp_path / d)]) == 0
    rows = read_csv(tmp_path / "a" / "scores.csv")
    assert rows[0] == ["checkpoint", "step", "score"]
    assert len(rows) == 1 + 1  # 10 updates, checkpoint every 10
    for name in ("scores.csv", "final.espk"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "train" and man["seeds"] == [0]
    assert str(tmp_path / "a" / "scores.csv") in man["artifacts"]
    assert len(man["scenario_files"][str(scenario)]) == 40


def test_config_hash_ignores_key_order():
    assert cli.config_hash({"a": 1, "b": {"c": 2, "d": 3}}) == cli.config_hash({"b": {"d": 3, "c": 2}, "a": 1})


def test_git_blob_hash(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"hello\n")
    assert cli.git_blob_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_espark_mock_run_and_resume(scenario, tmp_path):
    common = ["espark", "--scenario", str(scenario), "--mock-script", str(MOCK), "--iterations", "2",
              "--batch", "3", "--steps", "400", "--jobs", "1", "--skip-baseline"]
    assert cli.main(common + ["--out", str(tmp_path / "full")]) == 0
    report = json.loads((tmp_path / "full" / "report.json").read_text())
    jsonschema.validate(report, SCHEMA)
    assert cli.main(common + ["--out", str(tmp_path / "part"), "--stop-after", "1"]) == 0
    assert not (tmp_path / "part" / "report.json").exists()
    assert cli.main(common + ["--resume", str(tmp_path / "part")]) == 0
    assert (tmp_path / "part" / "report.json").read_bytes() == (tmp_path / "full" / "report.json").read_bytes()


def test_espark_parallel_jobs_match_serial(scenario, tmp_path):
    common = ["espark", "--scenario", str(scenario), "--mock-script", str(MOCK), "--iterations", "1",
              "--batch", "3", "--steps", "400", "--skip-baseline"]
    assert cli.main(common + ["--jobs", "1", "--out", str(tmp_path / "s")]) == 0
    assert cli.main(common + ["--jobs", "2", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "s" / "report.json").read_bytes() == (tmp_path / "p" / "report.json").read_bytes()


def test_espark_backend_failure_exit_code(scenario, tmp_path, capsys):
    script = tmp_path / "down.json"
    script.write_text(json.dumps([{"error": "service unavailable"}]))
    code = cli.main(["espark", "--scenario", str(scenario), "--mock-script", str(script), "--iterations", "1",
                     "--batch", "2", "--steps", "400", "--out", str(tmp_path / "run")])
    assert code == cli.EXIT_BACKEND
    assert "traffic.jsonl" in capsys.readouterr().err


def test_espark_check_failure_exit_code(scenario, tmp_path):
    script = tmp_path / "bad.json"
    script.write_text(json.dumps(["```\nlaunch_rockets > 1\n```"]))
    code = cli.main(["espark", "--scenario", str(scenario), "--mock-script", str(script), "--iterations", "1",
                     "--batch", "2", "--steps", "400", "--out", str(tmp_path / "run")])
    assert code == cli.EXIT_CHECK


def test_espark_needs_a_backend(scenario, tmp_path):
    assert cli.main(["espark", "--scenario", str(scenario), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_api_key_is_not_a_flag():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["espark", "--scenario", "x", "--api-key", "k"])
    assert API_KEY_ENV in cli.build_parser()._subparsers._group_actions[0].choices["espark"].format_help()


def test_baselines_outputs(scenario, tmp_path):
    args = ["baselines", "--scenario", str(scenario), "--steps", "400"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "a" / "comparison.csv")
    assert rows[0] == cli.BASELINE_COLUMNS
    assert [r[0] for r in rows[1:]] == ["never_order", "bs_static", "bs_dynamic", "ss", "ippo",
                                       "ippo_random_pruning", "ippo_ss_pruning", "ippo_upbound_pruning"]
    heat = read_csv(tmp_path / "a" / "heatmap_ippo.csv")
    assert heat[0] == ["agent", "x0", "x0.5", "x1", "x1.5", "x2", "x2.5", "x3", "x4", "x5"]
    assert len(heat) == 1 + 3
    assert sum(int(c) for r in heat[1:] for c in r[1:]) == 20 * 3 * 3  # steps x episodes x agents
    for name in ("comparison.csv", "comparison.txt", "heatmap_ippo.csv", "base_stock.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_verify(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "closed form 0.3852" in out and out.count("PASS") == 4
    assert cli.main(["verify", "--trials", "10"]) in (0, 1)
    assert "warning" in capsys.readouterr().err
