"""End-to-end CLI runs: artifacts, determinism, exit codes."""

import filecmp
import json
import shutil

import pytest

from ell.cli import _stage, StageFailure, main
from ell.model import EmptyInput

PIPELINE_ARTIFACTS = (
    "ingested.jsonl",
    "cleaned.jsonl",
    "cleaning_report.json",
    "detector_groups.json",
    "groupset.json",
    "indicator_report.json",
    "radar.json",
    "radar.svg",
    "radar.png",
    "indicators.png",
    "indicators.csv",
)


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    rc = main(["--out-dir", str(data), "--seed", "11", "synth"])
    assert rc == 0
    return data


def _run(data_dir, out_dir, *extra):
    return main(["--data-dir", str(data_dir), "--out-dir", str(out_dir),
                 "--seed", "11", *extra, "run"])


def test_run_produces_all_artifacts(scenario_dir, tmp_path):
    out = tmp_path / "out"
    assert _run(scenario_dir, out) == 0
    for name in PIPELINE_ARTIFACTS:
        path = out / name
        assert path.exists() and path.stat().st_size > 0, name
    report = json.loads((out / "indicator_report.json").read_text())
    assert set(report) == {"raw", "adjusted", "positive_raw",
                           "positive_adjusted", "metadata"}


def test_rerun_is_byte_identical(scenario_dir, tmp_path):
    out1, out2 = tmp_path / "one", tmp_path / "two"
    assert _run(scenario_dir, out1) == 0
    assert _run(scenario_dir, out2) == 0
    for name in PIPELINE_ARTIFACTS:
        assert filecmp.cmp(out1 / name, out2 / name, shallow=False), name


def test_stages_compose_like_run(scenario_dir, tmp_path):
    out1, out2 = tmp_path / "staged", tmp_path / "oneshot"
    base = ["--data-dir", str(scenario_dir), "--seed", "11"]
    for stage in ("ingest", "clean", "detect", "cluster", "metrics", "report"):
        assert main([*base, "--out-dir", str(out1), stage]) == 0
    assert _run(scenario_dir, out2) == 0
    for name in PIPELINE_ARTIFACTS:
        assert filecmp.cmp(out1 / name, out2 / name, shallow=False), name


def test_missing_prerequisite_exits_2(scenario_dir, tmp_path, capsys):
    rc = main(["--data-dir", str(scenario_dir), "--out-dir",
               str(tmp_path / "out"), "detect"])
    assert rc == 2
    assert "run `ell clean` first" in capsys.readouterr().err


def test_stage_failure_exits_1(scenario_dir, tmp_path, capsys):
    data = tmp_path / "data"
    shutil.copytree(scenario_dir, data)
    (data / "market.json").unlink()
    out = tmp_path / "out"
    base = ["--data-dir", str(data), "--out-dir", str(out), "--seed", "11"]
    for stage in ("ingest", "clean", "detect", "cluster"):
        assert main([*base, stage]) == 0
    rc = main([*base, "metrics"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "stage metrics" in err
    assert "MissingSnapshot" in err
    assert not (out / "indicator_report.json").exists()


def test_partial_rename_on_stage_failure(tmp_path):
    target = tmp_path / "artifact.json"

    def work():
        target.write_text("half-written")
        raise EmptyInput("boom")

    with pytest.raises(StageFailure) as exc_info:
        _stage("demo", [target], work)
    assert exc_info.value.stage == "demo"
    assert not target.exists()
    assert (tmp_path / "artifact.json.partial").read_text() == "half-written"


def test_unknown_config_key_exits_2(tmp_path, capsys):
    config = tmp_path / "ell.yaml"
    config.write_text("seed: 1\nnonsense: true\n")
    rc = main(["--config", str(config), "--out-dir", str(tmp_path / "out"),
               "synth"])
    assert rc == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_unknown_section_key_exits_2(tmp_path, capsys):
    config = tmp_path / "ell.yaml"
    config.write_text("detect:\n  bogus: 1\n")
    rc = main(["--config", str(config), "--out-dir", str(tmp_path / "out"),
               "synth"])
    assert rc == 2
    assert "unknown detect config keys" in capsys.readouterr().err


def test_config_drives_synth(tmp_path):
    config = tmp_path / "ell.yaml"
    config.write_text(
        "synth:\n  n_retail: 25\n  n_entities: 2\n  patterns: [diffusion]\n")
    out = tmp_path / "out"
    rc = main(["--config", str(config), "--out-dir", str(out), "synth"])
    assert rc == 0
    truth = json.loads((out / "ground_truth.json").read_text())
    assert len(truth["groups"]) == 2


def test_seed_flag_overrides_config_seed(tmp_path):
    config = tmp_path / "ell.yaml"
    config.write_text("seed: 3\n")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(config), "--seed", "5",
                 "--out-dir", str(out1), "synth"]) == 0
    assert main(["--seed", "5", "--out-dir", str(out2), "synth"]) == 0
    assert filecmp.cmp(out1 / "transfers.csv", out2 / "transfers.csv",
                       shallow=False)


def test_exclude_flags_reach_report(scenario_dir, tmp_path):
    out = tmp_path / "out"
    base = ["--data-dir", str(scenario_dir), "--out-dir", str(out),
            "--seed", "11"]
    for stage in ("ingest", "clean", "detect", "cluster"):
        assert main([*base, stage]) == 0
    rc = main([*base, "--exclude-flags", "suspected_market_maker", "metrics"])
    assert rc == 0
    report = json.loads((out / "indicator_report.json").read_text())
    assert report["metadata"]["exclude_flags"] == ["suspected_market_maker"]


def test_compare_subcommand(scenario_dir, tmp_path):
    out = tmp_path / "out"
    assert _run(scenario_dir, out) == 0
    report = out / "indicator_report.json"
    other = tmp_path / "other_report.json"
    shutil.copy(report, other)
    cmp_out = tmp_path / "cmp"
    rc = main(["--out-dir", str(cmp_out), "compare", str(report), str(other),
               "--names", "alpha,beta"])
    assert rc == 0
    for name in ("comparison.csv", "comparison.txt", "comparison.png"):
        assert (cmp_out / name).exists(), name
    text = (cmp_out / "comparison.txt").read_text()
    assert "alpha" in text and "beta" in text


def test_compare_needs_two_reports(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path / "out"), "compare"])
    assert rc == 2
    assert "at least two" in capsys.readouterr().err
