"""
Run-directory persistence: report.json, the CSV tables and plot series, and manifest.json.

Every table is written on every run, header included, so the file set is stable
across subcommands. report.json and the tables are byte-identical for identical
inputs; only the manifest carries a timestamp.
"""

import csv
import hashlib
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import orjson
from pydantic import BaseModel, Field, ValidationError

from amplification_harness import AmplificationReport, AuditReport, MitigationReport, PairwiseReport, SweepResult
from disparity_metrics import SEPARABILITY_CELLS, DisparityReport
from lab_config import ExperimentConfig, lab_settings
from lab_errors import ReportIOError, SchemaError
from mlp_network import MlpSpec, TrainingCurve

logger = logging.getLogger("amplification-lab.reports")

REPORT_FILE = "report.json"
MANIFEST_FILE = "manifest.json"
JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY

DISPARITY_COLUMNS = ["condition", "checkpoint", "group_a", "group_b", "acc_single_a", "acc_single_b",
                     "acc_combined_a", "acc_combined_b", "stderr_single_a", "stderr_single_b",
                     "stderr_combined_a", "stderr_combined_b", "d_tilde", "d", "k_ratio", "gap",
                     "gap_stderr", "amplified"]
STEP_COLUMNS = ["condition", "step", "group_a", "group_b", "acc_single_a", "acc_single_b",
                "acc_combined_a", "acc_combined_b", "d_tilde", "d", "gap", "gap_stderr"]
CURVE_COLUMNS = ["condition", "stage", "trained_group", "run", "seed", "step", "group", "split", "accuracy", "loss"]
TASK_COLUMNS = ["condition", "task_id", "description", "d_tilde", "d", *SEPARABILITY_CELLS, "mean_accuracy"]
REGRESSION_COLUMNS = ["condition", "fit", "name", "estimate", "stderr", "t_value", "r_squared", "n", "p"]
SWEEP_COLUMNS = ["variable", "value", "k", "k_stderr", "k_with_intercept", "r_squared", "n_tasks", "mean_accuracy",
                 "accuracy_std"]
MITIGATION_COLUMNS = ["strategy", "checkpoint", "group_a", "group_b", "d_before", "d_after", "delta",
                      "d_tilde_before", "d_tilde_after"]
PAIR_COLUMNS = ["class_i", "class_j", "name_i", "name_j", "cosine_distance", "distance_rank"]


class TrainingSummary(BaseModel):
    spec: MlpSpec
    seed: int
    curve: TrainingCurve
    model_path: Optional[str] = Field(None, description="Saved .npz relative to the run directory")


class LabResults(BaseModel):
    """Everything one subcommand produced; the sections it did not run stay None."""

    command: str
    config_hash: str = ""
    config: Dict[str, Any] = Field(default_factory=dict, description="Resolved experiment config")
    audit: Optional[AuditReport] = None
    amplification: Optional[AmplificationReport] = None
    sweep: Optional[SweepResult] = None
    mitigation: Optional[MitigationReport] = None
    pairwise: Optional[PairwiseReport] = None
    training: Optional[TrainingSummary] = None


def run_directory(config: ExperimentConfig, command: str, digest: str) -> str:
    """config.output_dir, or <AMPLAB_OUTPUT_ROOT>/<command>-<hash prefix>."""
    return config.output_dir or os.path.join(lab_settings().output_root, f"{command}-{digest[:12]}")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_table(path: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]],
                 key: Sequence[str]) -> None:
    ordered = sorted(rows, key=lambda row: tuple(row[name] for name in key))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in ordered:
            writer.writerow([_cell(row.get(name)) for name in columns])


def _disparity_row(condition: str, report: DisparityReport) -> Dict[str, Any]:
    row = report.model_dump(include=set(DISPARITY_COLUMNS))
    row["condition"] = condition
    return row


def _audits(results: LabResults) -> List[tuple]:
    audits = []
    if results.audit:
        audits.append(("audit", results.audit))
    if results.mitigation:
        audits.append(("mitigation/before", results.mitigation.before))
        audits.append(("mitigation/after", results.mitigation.after))
    return audits


def disparity_rows(results: LabResults) -> List[Dict[str, Any]]:
    rows = []
    for condition, audit in _audits(results):
        rows.extend(_disparity_row(condition, report) for report in [*audit.early_stopped, *audit.final])
    return rows


def step_rows(results: LabResults) -> List[Dict[str, Any]]:
    rows = []
    for condition, audit in _audits(results):
        for report in audit.trajectory:
            row = report.model_dump(include=set(STEP_COLUMNS))
            row.update(condition=condition, step=int(report.checkpoint.split("_", 1)[1]))
            rows.append(row)
    return rows


def curve_rows(results: LabResults) -> List[Dict[str, Any]]:
    rows = []
    for condition, audit in _audits(results):
        for stage in (audit.single_group, audit.combined):
            for entry in stage.runs:
                trained = "all" if entry.group is None else entry.group
                for row in entry.curve.rows(entry.run):
                    rows.append({"condition": condition, "stage": stage.stage, "trained_group": str(trained),
                                 "seed": entry.seed, **row})
    if results.training:
        for row in results.training.curve.rows(0):
            rows.append({"condition": "train", "stage": "combined", "trained_group": "all",
                         "seed": results.training.seed, **row})
    return rows


def _amplification_reports(results: LabResults) -> List[AmplificationReport]:
    reports = [results.amplification] if results.amplification else []
    if results.sweep:
        reports.extend(results.sweep.reports)
    return reports


def task_rows(results: LabResults) -> List[Dict[str, Any]]:
    rows = []
    for report in _amplification_reports(results):
        for record in report.records:
            rows.append({"condition": report.condition, "task_id": record.task_id,
                         "description": record.description, "d_tilde": record.d_tilde, "d": record.d,
                         **record.separability.cells, "mean_accuracy": record.mean_accuracy})
    return rows


def regression_rows(results: LabResults) -> List[Dict[str, Any]]:
    rows = []
    for report in _amplification_reports(results):
        for fit_name, fit in (("no_intercept", report.fit_no_intercept), ("with_intercept", report.fit_with_intercept)):
            if fit is None:
                continue
            for entry in fit.table():
                rows.append({"condition": report.condition, "fit": fit_name, **entry,
                             "r_squared": fit.r_squared, "n": fit.n, "p": fit.p})
    return rows


def sweep_rows(results: LabResults) -> List[Dict[str, Any]]:
    if not results.sweep:
        return []
    return [{"variable": results.sweep.variable, **point.model_dump()} for point in results.sweep.points]


def mitigation_rows(results: LabResults) -> List[Dict[str, Any]]:
    if not results.mitigation:
        return []
    mitigation = results.mitigation
    return [{"strategy": mitigation.strategy.kind, "checkpoint": mitigation.checkpoint, **delta.model_dump()}
            for delta in mitigation.deltas]


def _write_pairwise(out_dir: str, pairwise: Optional[PairwiseReport]) -> List[str]:
    """pairwise_accuracy.csv (matrix per model), kendall_tau.csv and pairwise_ranks.csv."""
    class_names = pairwise.class_names if pairwise else []
    labels = pairwise.model_labels if pairwise else []

    accuracy_rows = []
    if pairwise:
        for model, matrix in zip(labels, pairwise.matrices):
            for index, name in enumerate(class_names):
                accuracy_rows.append({"model": model, "class_index": index, "class": name,
                                      **dict(zip(class_names, matrix[index]))})
    _write_table(os.path.join(out_dir, "pairwise_accuracy.csv"), ["model", "class_index", "class", *class_names],
                 accuracy_rows, key=("model", "class_index"))

    tau_rows = [{"model": label, **dict(zip(labels, row))} for label, row in
                zip(labels, pairwise.kendall_tau)] if pairwise else []
    _write_table(os.path.join(out_dir, "kendall_tau.csv"), ["model", *labels], tau_rows, key=("model",))

    rank_columns = [f"accuracy_rank_{label}" for label in labels]
    pair_rows = []
    if pairwise:
        for index, (i, j) in enumerate(pairwise.class_pairs):
            pair_rows.append({"class_i": i, "class_j": j, "name_i": class_names[i], "name_j": class_names[j],
                              "cosine_distance": pairwise.cosine_distances[index],
                              "distance_rank": pairwise.distance_ranks[index],
                              **{column: ranks[index] for column, ranks in zip(rank_columns, pairwise.accuracy_ranks)}})
    _write_table(os.path.join(out_dir, "pairwise_ranks.csv"), [*PAIR_COLUMNS, *rank_columns], pair_rows,
                 key=("class_i", "class_j"))
    return ["pairwise_accuracy.csv", "kendall_tau.csv", "pairwise_ranks.csv"]


def write_tables(results: LabResults, out_dir: str) -> List[str]:
    """Write every CSV table of the run directory; returns the file names."""
    tables = [
        ("disparity.csv", DISPARITY_COLUMNS, disparity_rows(results), ("condition", "checkpoint", "group_a", "group_b")),
        ("disparity_by_step.csv", STEP_COLUMNS, step_rows(results), ("condition", "step", "group_a", "group_b")),
        ("training_curves.csv", CURVE_COLUMNS, curve_rows(results),
         ("condition", "stage", "trained_group", "run", "step", "split", "group")),
        ("amplification_tasks.csv", TASK_COLUMNS, task_rows(results), ("condition", "task_id")),
        ("regression.csv", REGRESSION_COLUMNS, regression_rows(results), ("condition", "fit", "name")),
        ("sweep.csv", SWEEP_COLUMNS, sweep_rows(results), ("variable", "value")),
        ("mitigation.csv", MITIGATION_COLUMNS, mitigation_rows(results), ("strategy", "group_a", "group_b")),
    ]
    written = []
    for name, columns, rows, key in tables:
        _write_table(os.path.join(out_dir, name), columns, rows, key)
        written.append(name)
    return written + _write_pairwise(out_dir, results.pairwise)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, results: LabResults, artifacts: Sequence[str],
                   inputs: Sequence[str] = ()) -> str:
    manifest = {
        "command": results.command,
        "config_hash": results.config_hash,
        "inputs": {path: _sha256(path) for path in inputs if os.path.isfile(path)},
        "artifacts": {name: _sha256(os.path.join(out_dir, name)) for name in sorted(artifacts)},
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "wb") as handle:
        handle.write(orjson.dumps(manifest, option=JSON_OPTIONS))
    return path


def emit_report(results: LabResults, out_dir: str, inputs: Sequence[str] = ()) -> List[str]:
    """
    Write report.json, every CSV table and manifest.json into `out_dir`.

    Args:
        results (LabResults): What the subcommand produced; empty sections give header-only tables.
        out_dir (str): Run directory, created if missing.
        inputs: input files whose checksums go into the manifest.

    Returns:
        List[str]: Artifact file names (manifest excluded).

    Raises:
        ReportIOError: the directory or a file cannot be written.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, REPORT_FILE), "wb") as handle:
            handle.write(orjson.dumps(results.model_dump(mode="json"), option=JSON_OPTIONS))
        artifacts = [REPORT_FILE, *write_tables(results, out_dir)]
        model_path = results.training.model_path if results.training else None
        if model_path and os.path.isfile(os.path.join(out_dir, model_path)):
            artifacts.append(model_path)
        write_manifest(out_dir, results, artifacts, inputs)
    except OSError as e:
        raise ReportIOError(f"Cannot write report ({e.strerror})", e.filename or out_dir) from e
    logger.info(f"Wrote {len(artifacts)} artifacts to {out_dir}")
    return artifacts


def load_results(out_dir: str) -> LabResults:
    """Read report.json of a run directory back into its report types."""
    path = os.path.join(out_dir, REPORT_FILE)
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except OSError as e:
        raise ReportIOError(f"Cannot read report ({e.strerror})", path) from e
    try:
        return LabResults.model_validate_json(payload)
    except ValidationError as e:
        raise SchemaError(f"{path} is not a valid lab report: {e.error_count()} problems") from e
