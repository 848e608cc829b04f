import os

import orjson
import pytest

from amplification_lab import main
from lab_reports import REPORT_FILE, load_results

SMALL_AUDIT = ["--task", "twin", "--n", "40", "--runs", "2", "--epochs", "2", "--set", "model.hidden_widths=[8]"]


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("AMPLAB_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.delenv("AMPLAB_JOBS", raising=False)


def read_bytes(*parts):
    with open(os.path.join(*parts), "rb") as handle:
        return handle.read()


def test_missing_config_exits_with_data_code(tmp_path, capsys):
    missing = str(tmp_path / "missing.cfg")
    assert main(["audit", "--config", missing]) == 2
    assert missing in capsys.readouterr().err


def test_usage_errors_exit_with_one(capsys):
    assert main(["audit", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["sweep", "--grid", "16,abc"]) == 1
    assert main(["audit", "--set", "protocol.n_runs"]) == 1
    assert "error[usage]" in capsys.readouterr().err


def test_help_exits_cleanly():
    assert main(["audit", "--help"]) == 0


def test_generate_is_deterministic(tmp_path, capsys):
    first, second = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    assert main(["generate", "--task", "twin", "--n", "40", "--seed", "3", "--out", first]) == 0
    assert main(["generate", "--task", "twin", "--n", "40", "--seed", "3", "--out", second]) == 0
    assert read_bytes(first) == read_bytes(second)
    assert "config-hash:" in capsys.readouterr().err


def test_invalid_generator_size_is_a_config_error(capsys):
    assert main(["generate", "--task", "twin", "--n", "42"]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_unwritable_task_path_is_a_data_error(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    target = str(blocker / "task.csv")
    assert main(["generate", "--task", "twin", "--n", "40", "--out", target]) == 2
    err = capsys.readouterr().err
    assert "error[data]" in err and "Cannot write task" in err


def test_train_saves_a_model(tmp_path):
    out = str(tmp_path / "train")
    assert main(["train", "--task", "twin", "--n", "40", "--epochs", "2", "--out", out]) == 0
    assert os.path.isfile(os.path.join(out, "model.npz"))
    results = load_results(out)
    assert results.training.model_path == "model.npz"
    assert results.training.curve.checkpoints


def test_audit_json_and_determinism(tmp_path, capsys):
    first, second = str(tmp_path / "first"), str(tmp_path / "second")
    assert main(["audit", *SMALL_AUDIT, "--out", first, "--json"]) == 0
    captured = capsys.readouterr()
    payload = orjson.loads(captured.out)
    assert payload["command"] == "audit"
    assert payload["audit"]["early_stopped"][0]["group_a"] == 0
    assert f"run-dir: {first}" in captured.err

    assert main(["audit", *SMALL_AUDIT, "--out", second]) == 0
    for name in os.listdir(first):
        if name != "manifest.json":
            assert read_bytes(first, name) == read_bytes(second, name), name


def test_report_rewrites_tables(tmp_path, capsys):
    source, rewritten = str(tmp_path / "source"), str(tmp_path / "rewritten")
    assert main(["audit", *SMALL_AUDIT, "--out", source]) == 0
    capsys.readouterr()
    assert main(["report", "--from", source, "--out", rewritten]) == 0
    digest = load_results(source).config_hash
    assert f"config-hash: {digest}" in capsys.readouterr().err
    for name in ("disparity.csv", "disparity_by_step.csv", "training_curves.csv", REPORT_FILE):
        assert read_bytes(source, name) == read_bytes(rewritten, name)
    assert main(["report", "--from", str(tmp_path / "nowhere")]) == 2


def test_default_run_directory(tmp_path, capsys):
    assert main(["audit", *SMALL_AUDIT]) == 0
    runs = os.listdir(tmp_path / "runs")
    assert len(runs) == 1 and runs[0].startswith("audit-")
    assert os.path.isfile(tmp_path / "runs" / runs[0] / REPORT_FILE)


@pytest.mark.slow
def test_quick_audit_is_byte_identical(tmp_path):
    first, second = str(tmp_path / "first"), str(tmp_path / "second")
    assert main(["audit", "--quick", "--out", first]) == 0
    assert main(["audit", "--quick", "--out", second]) == 0
    for name in os.listdir(first):
        if name != "manifest.json":
            assert read_bytes(first, name) == read_bytes(second, name), name


@pytest.mark.slow
def test_quick_amplify_smoke(tmp_path):
    out = str(tmp_path / "amplify")
    assert main(["amplify", "--quick", "--out", out]) == 0
    results = load_results(out)
    assert results.amplification.m_tasks == 8
    rows = read_bytes(out, "amplification_tasks.csv").decode().splitlines()
    assert len(rows) == 9
