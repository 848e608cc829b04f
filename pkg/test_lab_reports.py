import os

import numpy as np
import orjson
import pytest

from amplification_harness import SampledTask, StepRecord, TaskRecord, audit, design_sweep, load_task_dataset
from disparity_metrics import SEPARABILITY_LAYOUTS, SeparabilityVector
from grouped_datasets import GroupedDataset
from lab_config import apply_overrides, config_hash, load_config
from lab_errors import ReportIOError, SchemaError
from lab_reports import (
    DISPARITY_COLUMNS,
    MANIFEST_FILE,
    REPORT_FILE,
    SWEEP_COLUMNS,
    TASK_COLUMNS,
    LabResults,
    disparity_rows,
    emit_report,
    load_results,
    run_directory,
)

EXPECTED_TABLES = {"disparity.csv", "disparity_by_step.csv", "training_curves.csv", "amplification_tasks.csv",
                   "regression.csv", "sweep.csv", "mitigation.csv", "pairwise_accuracy.csv", "kendall_tau.csv",
                   "pairwise_ranks.csv"}


@pytest.fixture(scope="module")
def audit_results():
    config = apply_overrides(load_config(), ["protocol.n_runs=2", "train.epochs=4", "train.eval_every=2",
                                             "model.hidden_widths=[8]", "task.generator.generator=twin",
                                             "task.generator.n=80"])
    report = audit(load_task_dataset(config), config)
    return LabResults(command="audit", config_hash=config_hash(config), config=config.model_dump(mode="json"),
                      audit=report)


def read_bytes(directory, name):
    with open(os.path.join(directory, name), "rb") as handle:
        return handle.read()


def test_empty_results_write_header_only_tables(tmp_path):
    artifacts = emit_report(LabResults(command="generate"), str(tmp_path))
    assert set(artifacts) == EXPECTED_TABLES | {REPORT_FILE}
    assert read_bytes(tmp_path, "disparity.csv").decode() == ",".join(DISPARITY_COLUMNS) + "\n"
    manifest = orjson.loads(read_bytes(tmp_path, MANIFEST_FILE))
    assert set(manifest["artifacts"]) == set(artifacts)
    assert manifest["command"] == "generate"


def test_audit_tables(tmp_path, audit_results):
    emit_report(audit_results, str(tmp_path))
    rows = read_bytes(tmp_path, "disparity.csv").decode().splitlines()
    # early_stopped and final for the single group pair
    assert len(rows) == 3
    assert rows[1].startswith("audit,early_stopped,0,1,")
    steps = read_bytes(tmp_path, "disparity_by_step.csv").decode().splitlines()
    assert len(steps) == 1 + len(audit_results.audit.trajectory)
    assert {row["condition"] for row in disparity_rows(audit_results)} == {"audit"}


def test_reports_are_byte_identical(tmp_path, audit_results):
    first, second = tmp_path / "first", tmp_path / "second"
    artifacts = emit_report(audit_results, str(first))
    emit_report(audit_results, str(second))
    for name in artifacts:
        assert read_bytes(first, name) == read_bytes(second, name), name


def test_reloaded_results_rewrite_the_same_tables(tmp_path, audit_results):
    source, rewritten = tmp_path / "source", tmp_path / "rewritten"
    artifacts = emit_report(audit_results, str(source))
    loaded = load_results(str(source))
    assert loaded.model_dump() == audit_results.model_dump()
    emit_report(loaded, str(rewritten))
    for name in artifacts:
        assert read_bytes(source, name) == read_bytes(rewritten, name), name


def test_manifest_hashes_inputs(tmp_path):
    config_file = tmp_path / "experiment.yaml"
    config_file.write_text("seed: 3\n")
    emit_report(LabResults(command="audit"), str(tmp_path / "run"), inputs=[str(config_file)])
    manifest = orjson.loads(read_bytes(tmp_path / "run", MANIFEST_FILE))
    assert list(manifest["inputs"]) == [str(config_file)]
    assert len(manifest["inputs"][str(config_file)]) == 64


def test_load_results_errors(tmp_path):
    with pytest.raises(ReportIOError, match="report.json"):
        load_results(str(tmp_path / "nowhere"))
    (tmp_path / REPORT_FILE).write_text('{"command": 3, "audit": "yes"}')
    with pytest.raises(SchemaError):
        load_results(str(tmp_path))


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(ReportIOError):
        emit_report(LabResults(command="audit"), str(blocker / "run"))


def test_run_directory(monkeypatch):
    monkeypatch.setenv("AMPLAB_OUTPUT_ROOT", "results")
    config = load_config()
    digest = config_hash(config)
    assert run_directory(config, "audit", digest) == os.path.join("results", f"audit-{digest[:12]}")
    explicit = apply_overrides(config, ["output_dir=somewhere"])
    assert run_directory(explicit, "audit", digest) == "somewhere"


class AccuracySampler:
    def sample(self, task_id, seed):
        return SampledTask(task_id, GroupedDataset(np.zeros((4, 1)), [0, 1, 0, 1], [0, 0, 1, 1]), "fixed",
                           {"seed": seed})


def accuracy_record(task, config):
    rng = np.random.default_rng(task.parameters["seed"])
    d_tilde = rng.uniform(0.02, 0.3)
    cells = dict(zip(SEPARABILITY_LAYOUTS["within_group"], rng.uniform(0.5, 1.0, 4)))
    return TaskRecord(task_id=task.task_id, d_tilde=d_tilde, d=1.2 * d_tilde + rng.normal(scale=0.01),
                      separability=SeparabilityVector(cells=cells), mean_accuracy=0.75,
                      steps=[StepRecord(step=5, d_tilde=d_tilde, d=d_tilde, separability=cells, mean_accuracy=0.75)])


def test_sweep_tables_carry_task_accuracy(tmp_path):
    sweep = design_sweep("width", [16, 32], load_config(), AccuracySampler(), m_tasks=8, evaluate=accuracy_record)
    emit_report(LabResults(command="sweep", sweep=sweep), str(tmp_path))

    sweep_rows = read_bytes(tmp_path, "sweep.csv").decode().splitlines()
    assert sweep_rows[0] == ",".join(SWEEP_COLUMNS)
    assert sweep_rows[1].endswith(",8,0.75,0.0")
    task_rows = read_bytes(tmp_path, "amplification_tasks.csv").decode().splitlines()
    assert task_rows[0] == ",".join(TASK_COLUMNS)
    assert len(task_rows) == 1 + 2 * 8
    assert all(row.endswith(",0.75") for row in task_rows[1:])
