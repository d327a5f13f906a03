import json
import pytest

from fusionprog.cli import main

MICRO_CONFIG = """
[synth]
n_patients = 24
n_slices = 4
hw = 16,16
adc_signal_strength = 6.0
dwi_signal_strength = 6.0
tabular_signal_strength = 1.5

[data]
n_slices = 4
image_size = 16,16
split_seed = 3

[model]
channels = 8,16
embed_dim = 8
structured_hidden = 24,12,8

[contrastive]
temperature = 0.5

[augment]
patch_size = 4

[stage1]
epochs = 1
batch_size = 8

[stage2]
epochs = 1
batch_size = 8
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "micro.ini").write_text(MICRO_CONFIG)
    return root


@pytest.fixture(scope="module")
def cohort(workdir):
    out = workdir / "cohort"
    code = main(["synth", "--config", str(workdir / "micro.ini"), "--out", str(out), "--seed", "4"])
    assert code == 0
    return out


def test_synth_writes_cohort_and_snapshot(cohort):
    assert (cohort / "manifest.csv").exists()
    assert (cohort / "config.ini").exists()
    assert any(p.is_dir() for p in (cohort / "volumes").iterdir())


def test_synth_snapshot_reproduces_cohort(cohort, workdir):
    out2 = workdir / "cohort2"
    code = main(["synth", "--config", str(cohort / "config.ini"), "--out", str(out2)])
    assert code == 0
    assert (out2 / "manifest.csv").read_bytes() == (cohort / "manifest.csv").read_bytes()


def test_describe_prints_table(cohort, capsys):
    assert main(["describe", "--data", str(cohort)]) == 0
    out = capsys.readouterr().out
    assert "Clinical attributes" in out and "nihss_01" in out


def test_train_eval_pipeline(cohort, workdir, capsys):
    cfg = str(workdir / "micro.ini")
    s1 = workdir / "s1"
    assert main(["train", "--stage", "1", "--config", cfg, "--data", str(cohort), "--out", str(s1)]) == 0
    assert (s1 / "best" / "manifest.json").exists()
    assert (s1 / "config.ini").exists()

    s2 = workdir / "s2"
    code = main(
        ["train", "--stage", "2", "--config", cfg, "--data", str(cohort), "--init", str(s1 / "best"), "--out", str(s2)]
    )
    assert code == 0

    capsys.readouterr()
    code = main(["eval", "--config", cfg, "--ckpt", str(s2 / "best"), "--data", str(cohort), "--split", "test"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["split"] == "test"
    assert 0.0 <= payload["auc"] <= 1.0


def test_missing_data_flag_is_usage_error(capsys):
    assert main(["train", "--stage", "1", "--out", "/tmp/x"]) == 1


def test_unknown_flag_rejected():
    assert main(["synth", "--out", "/tmp/x", "--bogus"]) == 1


def test_bad_config_is_usage_error(workdir, cohort):
    bad = workdir / "bad.ini"
    bad.write_text("[stage1]\nepochs = 0\n")
    code = main(["train", "--stage", "1", "--config", str(bad), "--data", str(cohort), "--out", str(workdir / "y")])
    assert code == 1


def test_runtime_failure_exit_code(workdir):
    code = main(["describe", "--data", str(workdir / "missing")])
    assert code == 2


def test_verify_metrics_suite_passes(capsys):
    assert main(["verify", "--suite", "metrics"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out


def test_ablate_table5_micro(cohort, workdir, capsys):
    out = workdir / "ablate5"
    cfg = str(workdir / "micro.ini")
    code = main(
        ["ablate", "--grid", "table5", "--config", cfg, "--data", str(cohort), "--out", str(out), "--seeds", "0"]
    )
    assert code == 0
    report = (out / "report.md").read_text()
    assert "fusion_without_nihss" in report
    assert "0.8703" in report  # published annotation row
    payload = json.loads((out / "report.json").read_text())
    assert payload["tables"][0]["table_id"] == "table5"
    assert len(payload["tables"][0]["rows"]) == 6
