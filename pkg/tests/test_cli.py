import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

import config
import pqcli
from logic.errors import ContractViolation
from logic.models import RunReport
from pqcli import cli, cli_main


def _write_config(tmp_path: Path, payload: dict) -> str:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    return str(path)


def test_gen_data_writes_manifest(tmp_path: Path, tiny_config: dict) -> None:
    out = tmp_path / "stream"
    result = CliRunner().invoke(cli, ["gen-data", "--config", _write_config(tmp_path, tiny_config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["sessions"] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]
    assert (out / "train.csv").exists() and (out / "test.csv").exists()


def test_gen_data_cifar_preset_partition(tmp_path: Path) -> None:
    out = tmp_path / "cifar"
    result = CliRunner().invoke(cli, ["gen-data", "--preset", "cifar_shaped", "--out", str(out),
                                      "--input-dim", "2", "--base-train-per-class", "1", "--test-per-class", "1"])
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert len(manifest["sessions"][0]) == 60
    assert [len(s) for s in manifest["sessions"][1:]] == [5] * 8
    assert manifest["total_classes"] == 100


def test_train_twice_gives_identical_reports(tmp_path: Path, tiny_config: dict) -> None:
    cfg = _write_config(tmp_path, tiny_config)
    runner = CliRunner()
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(cli, ["train", "--config", cfg, "--seed", "7", "--out", str(out)])
        assert result.exit_code == 0, result.output
        texts.append((out / "report.json").read_bytes())
        for artifact in ("accuracy.csv", "net.bin", "bank.bin"):
            assert (out / artifact).exists()
    assert texts[0] == texts[1]
    report = RunReport.from_json(texts[0].decode("utf-8"))
    assert report.seed == 7
    assert report.config["plan"]["seed"] == 7


def test_env_seed_sits_between_config_and_flag(tmp_path: Path, tiny_config: dict,
                                               monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(config, "PQ_SEED", 21)
    cfg = _write_config(tmp_path, tiny_config)
    runner = CliRunner()
    result = runner.invoke(cli, ["train", "--config", cfg, "--out", str(tmp_path / "env")])
    assert result.exit_code == 0, result.output
    assert RunReport.from_json((tmp_path / "env" / "report.json").read_text(encoding="utf-8")).seed == 21
    result = runner.invoke(cli, ["train", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "flag")])
    assert result.exit_code == 0, result.output
    assert RunReport.from_json((tmp_path / "flag" / "report.json").read_text(encoding="utf-8")).seed == 4


def test_flags_override_config_leaves(tmp_path: Path, tiny_config: dict) -> None:
    out = tmp_path / "run"
    result = CliRunner().invoke(cli, [
        "train", "--config", _write_config(tmp_path, tiny_config), "--out", str(out),
        "--lambda", "0.25", "--b-max", "2", "--loss-mode", "triplet", "--no-hinge", "--anchor-sign", "-1",
        "--calibrate-per-query", "--classify-avg-copies",
    ])
    assert result.exit_code == 0, result.output
    report = RunReport.from_json((out / "report.json").read_text(encoding="utf-8"))
    plan = report.config["plan"]
    assert plan["bank"]["lambda"] == 0.25
    assert plan["bank"]["b_max"] == 2
    assert plan["bank"]["anchor_sign"] == -1
    assert plan["loss_mode"] == "triplet"
    assert plan["hinge"] is False
    assert plan["calibrate_per_query"] is True
    assert report.config["eval"]["classify_avg_copies"] is True
    assert report.method == "triplet"


def test_finetune_baseline_writes_no_bank(tmp_path: Path, tiny_config: dict) -> None:
    out = tmp_path / "ft"
    result = CliRunner().invoke(cli, ["train", "--config", _write_config(tmp_path, tiny_config),
                                      "--baseline", "finetune", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert not (out / "bank.bin").exists()
    assert RunReport.from_json((out / "report.json").read_text(encoding="utf-8")).method == "finetune"


def test_train_on_ingested_features_then_eval(tmp_path: Path, tiny_config: dict) -> None:
    cfg = _write_config(tmp_path, tiny_config)
    runner = CliRunner()
    data = tmp_path / "stream"
    assert runner.invoke(cli, ["gen-data", "--config", cfg, "--out", str(data)]).exit_code == 0
    manifest = str(data / "manifest.json")
    out = tmp_path / "run"
    result = runner.invoke(cli, ["train", "--config", cfg, "--data", manifest, "--out", str(out)])
    assert result.exit_code == 0, result.output

    result = runner.invoke(cli, ["eval", "--net", str(out / "net.bin"), "--bank", str(out / "bank.bin"),
                                 "--data", manifest])
    assert result.exit_code == 0, result.output
    record = json.loads(result.stdout)
    report = RunReport.from_json((out / "report.json").read_text(encoding="utf-8"))
    assert record["session"] == 3
    assert record["pooled"] == pytest.approx(report.cumulative[-1], abs=1e-12)
    assert record["per_split"] == pytest.approx(report.accuracy[-1], abs=1e-12)

    result = runner.invoke(cli, ["eval", "--net", str(out / "net.bin"), "--bank", str(out / "bank.bin"),
                                 "--data", manifest, "--session", "1"])
    assert json.loads(result.stdout)["per_split"] == [pytest.approx(report.accuracy[-1][0], abs=1e-12)]


def test_sweep_writes_one_report_per_cell(tmp_path: Path, tiny_config: dict) -> None:
    out = tmp_path / "sweep"
    result = CliRunner().invoke(cli, [
        "sweep", "--config", _write_config(tmp_path, tiny_config), "--out", str(out),
        "--param", "lambda", "--values", "0.3,0.25,0.2,0.15,0.1,0.05",
    ])
    assert result.exit_code == 0, result.output
    reports = sorted(out.glob("report_*.json"))
    assert len(reports) == 6
    rows = list(csv.reader((out / "sweep.csv").read_text(encoding="utf-8").splitlines()))
    assert rows[0] == ["cell", "lambda", "final_accuracy", "bwt", "K"]
    assert [r[1] for r in rows[1:]] == ["0.3", "0.25", "0.2", "0.15", "0.1", "0.05"]
    seeds = [RunReport.from_json((out / f"report_{i}.json").read_text(encoding="utf-8")).seed for i in range(6)]
    assert seeds == [3 ^ i for i in range(6)]


def test_sweep_grid_and_report_tables(tmp_path: Path, tiny_config: dict) -> None:
    out = tmp_path / "sweep"
    runner = CliRunner()
    result = runner.invoke(cli, [
        "sweep", "--config", _write_config(tmp_path, tiny_config), "--out", str(out),
        "--param", "lambda", "--values", "0.1,0.2", "--param", "b-max", "--values", "1,2",
    ])
    assert result.exit_code == 0, result.output
    files = [str(out / f"report_{i}.json") for i in range(4)]

    result = runner.invoke(cli, ["report", *files, "--layout", "grid", "--row", "lambda", "--col", "b-max"])
    assert result.exit_code == 0, result.output
    grid = list(csv.reader(result.stdout.splitlines()))
    assert grid[0] == ["lambda\\b-max", "1", "2"]
    assert [row[0] for row in grid[1:]] == ["0.1", "0.2"]

    table = tmp_path / "sessions.csv"
    result = runner.invoke(cli, ["report", *files, "--out", str(table)])
    assert result.exit_code == 0, result.output
    rows = list(csv.reader(table.read_text(encoding="utf-8").splitlines()))
    assert rows[0][:2] == ["run", "method"] and len(rows) == 5


def test_exit_codes(tmp_path: Path, tiny_config: dict) -> None:
    cfg = _write_config(tmp_path, tiny_config)
    assert cli_main(["train", "--config", cfg, "--no-such-key", "1", "--out", str(tmp_path / "x")]) == 2
    assert cli_main(["train", "--config", cfg, "--b-max", "0", "--out", str(tmp_path / "x")]) == 2
    assert cli_main(["train", "--preset", "nope"]) == 2
    assert cli_main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    assert cli_main(["train", "--config", cfg, "--data", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "x")]) == 3
    assert cli_main(["sweep", "--config", cfg, "--param", "lambda"]) == 1
    assert cli_main(["report", str(tmp_path / "r.json"), "--layout", "grid"]) == 1
    assert cli_main(["no-such-command"]) == 1
    assert cli_main(["train", "--config", cfg, "--sgd.initial-lr", "1e200", "--incremental-epochs", "3",
                     "--out", str(tmp_path / "boom")]) == 4
    assert cli_main(["train", "--config", cfg, "--base-sgd.initial-lr", "1e200", "--base-epochs", "3",
                     "--out", str(tmp_path / "base-boom")]) == 4


def test_stray_contract_violation_exits_nonzero(tmp_path: Path, tiny_config: dict,
                                               monkeypatch: pytest.MonkeyPatch) -> None:
    def broken(*args, **kwargs):
        raise ContractViolation("log_softmax input must be finite")

    monkeypatch.setattr(pqcli, "train_once", broken)
    cfg = _write_config(tmp_path, tiny_config)
    assert cli_main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 4
    assert "contract_violation" in Path(config.LOG_FILE_PATH).read_text(encoding="utf-8")


def test_preset_help_lists_shipped_presets() -> None:
    result = CliRunner().invoke(cli, ["train", "--help"])
    assert result.exit_code == 0
    assert "desk" in result.output and "cub_shaped" in result.output



def test_failures_are_logged(tmp_path: Path) -> None:
    assert cli_main(["train", "--preset", "nope"]) == 2
    assert "config_invalid" in Path(config.LOG_FILE_PATH).read_text(encoding="utf-8")
