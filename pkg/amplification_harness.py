"""
Experiment protocols.

The two-stage disparity audit (each group in isolation, then all groups together),
the amplification sweep with its nuisance-regressor fit, design-decision sweeps,
mitigation experiments and the pairwise class-difficulty analysis. Training runs are
independent jobs executed by a bounded asyncio work queue; every run seed is derived
from the root seed, the condition name and the run index.
"""

import asyncio
import hashlib
import logging
from dataclasses import dataclass, field
from functools import partial, wraps
from typing import Any, Callable, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, Field, model_validator

from disparity_metrics import (
    SEPARABILITY_CELLS,
    SEPARABILITY_LAYOUTS,
    DisparityReport,
    GroupAccuracies,
    SeparabilityVector,
    class_pairs,
    cosine_distance_class_means,
    kendall_tau,
    pairwise_difficulty_matrix,
    rank_transform,
    separability_cells,
    upper_triangle,
)
from grouped_datasets import (
    GroupedDataset,
    Sampler,
    augment_group,
    balance_groups,
    gen_class_blobs,
    gen_teaser_task,
    generate_task,
    load_idx,
    oversample_weights,
    stitch_binary_task,
    stratified_split,
)
from lab_config import DEFAULT_SWEEP_GRIDS, ExperimentConfig
from lab_errors import (
    ClassSelectionError,
    GroupError,
    IncompleteProtocolError,
    InvalidParameterError,
    LabError,
    SingularDesignError,
)
from mlp_network import Checkpoint, GradPenalty, Mlp, MlpSpec, TrainConfig, TrainingCurve, init_mlp, train
from regression_stats import DesignMatrix, PlsModel, RegressionResult, ols_fit, pls1_fit

logger = logging.getLogger("amplification-lab.harness")

T = TypeVar("T")
SamplerFactory = Callable[[GroupedDataset, int], Sampler]
CheckpointMode = Literal["early_stopped", "final"]

DEFAULT_M_TASKS = 30
MIN_TASKS = 7
D_TILDE = "d_tilde"


def derive_seed(root_seed: int, condition: str, run: int) -> int:
    """Non-negative 63-bit seed for run `run` of `condition`."""
    digest = hashlib.sha256(f"{root_seed}|{condition}|{run}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


async def _run_queue(jobs: Sequence[Callable[[], T]], limit: int) -> List[T]:
    semaphore = asyncio.Semaphore(limit)

    async def run_one(job: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(job)

    return list(await asyncio.gather(*(run_one(job) for job in jobs)))


def run_jobs(jobs: Sequence[Callable[[], T]], limit: int = 1) -> List[T]:
    """Execute independent jobs with at most `limit` in flight; results keep the job order."""
    if limit <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    return asyncio.run(_run_queue(jobs, limit))


@dataclass
class TrainingJob:
    condition: str
    run: int
    seed: int
    spec: MlpSpec
    train_config: TrainConfig
    train_set: GroupedDataset
    test_set: GroupedDataset
    group: Optional[int] = None
    sampler: Optional[Sampler] = None


@dataclass
class JobResult:
    job: TrainingJob
    model: Mlp
    curve: TrainingCurve


def _with_job_context(func: Callable[..., T]) -> Callable[..., T]:
    """Attach (condition, group, seed) to any lab error raised by a job."""
    @wraps(func)
    def wrapper(job: TrainingJob, *args: Any, **kwargs: Any) -> T:
        try:
            return func(job, *args, **kwargs)
        except LabError as e:
            logger.error(f"Job {job.condition} run {job.run} failed: {e.message}")
            raise e.with_context(condition=job.condition, group=job.group, seed=job.seed)
    return wrapper


@_with_job_context
def execute_job(job: TrainingJob) -> JobResult:
    config = job.train_config.model_copy(update={"seed": job.seed})
    model, curve = train(init_mlp(job.spec, job.seed), job.train_set, job.test_set, job.sampler, config)
    logger.debug(f"{job.condition} run {job.run}: final test {curve.checkpoints[-1].per_group_test_acc}")
    return JobResult(job, model, curve)


def _execute(jobs: Sequence[TrainingJob], config: ExperimentConfig) -> List[JobResult]:
    return run_jobs([partial(execute_job, job) for job in jobs], config.jobs())


class RunCurve(BaseModel):
    group: Optional[int] = Field(None, description="Group trained on in isolation; None for combined runs")
    run: int
    seed: int
    curve: TrainingCurve
    test_counts: Dict[int, int] = Field(default_factory=dict, description="Held-out rows per group (combined runs)")


class StageResult(BaseModel):
    stage: Literal["single_group", "combined"]
    final: Dict[int, GroupAccuracies]
    early_stopped: Dict[int, GroupAccuracies]
    overall_final: List[float] = Field(default_factory=list, description="Overall test accuracy per combined run")
    overall_early_stopped: List[float] = Field(default_factory=list)
    runs: List[RunCurve] = Field(default_factory=list)

    def accuracies(self, checkpoint: CheckpointMode) -> Dict[int, GroupAccuracies]:
        return self.early_stopped if checkpoint == "early_stopped" else self.final

    def curves(self, group: Optional[int] = None) -> List[RunCurve]:
        return sorted((entry for entry in self.runs if entry.group == group), key=lambda entry: entry.run)


def _model_spec(config: ExperimentConfig, dataset: GroupedDataset) -> MlpSpec:
    return config.model.build(dataset.n_features, max(2, dataset.num_classes))


def _check_groups(dataset: GroupedDataset, require_balanced: bool) -> None:
    sizes = dataset.group_counts()
    if dataset.num_groups == 0 or np.any(sizes == 0):
        raise GroupError(f"Every group needs rows, got sizes {sizes.tolist()}")
    if require_balanced:
        counts = dataset.cell_counts()
        if np.any(counts != counts[0]):
            raise GroupError("Groups differ in size or label histogram; balance the dataset "
                             "(protocol.balance) or waive the check explicitly")


def _splits(dataset: GroupedDataset, config: ExperimentConfig,
            condition: str) -> List[Tuple[GroupedDataset, GroupedDataset]]:
    return [stratified_split(dataset, config.test_fraction, derive_seed(config.seed, f"{condition}split", run))
            for run in range(config.n_runs)]


def plan_single_group_jobs(dataset: GroupedDataset, config: ExperimentConfig,
                           condition: str = "") -> List[TrainingJob]:
    """Stage-one jobs: split r of the full dataset, restricted to one group's rows."""
    spec = _model_spec(config, dataset)
    jobs = []
    for run, (train_set, test_set) in enumerate(_splits(dataset, config, condition)):
        for group in range(dataset.num_groups):
            name = f"{condition}single/g{group}"
            jobs.append(TrainingJob(name, run, derive_seed(config.seed, name, run), spec, config.train,
                                    train_set.group_slice(group), test_set.group_slice(group), group=group))
    return jobs


def plan_combined_jobs(dataset: GroupedDataset, config: ExperimentConfig, condition: str = "",
                       sampler_factory: Optional[SamplerFactory] = None) -> List[TrainingJob]:
    """Stage-two jobs: split r of the full dataset, every group together."""
    spec = _model_spec(config, dataset)
    name = f"{condition}combined"
    jobs = []
    for run, (train_set, test_set) in enumerate(_splits(dataset, config, condition)):
        seed = derive_seed(config.seed, name, run)
        sampler = sampler_factory(train_set, seed) if sampler_factory else None
        jobs.append(TrainingJob(name, run, seed, spec, config.train, train_set, test_set, sampler=sampler))
    return jobs


def run_single_group_protocol(dataset: GroupedDataset, config: ExperimentConfig, condition: str = "",
                              require_balanced: bool = True) -> StageResult:
    """
    Train N models per group on that group's rows only and test on that group's held-out rows.

    The early-stopped checkpoint of each run is the one with the best accuracy on that
    same held-out split (earliest on ties), so early-stopped values are an optimistic
    read of the curve. Final values use the last checkpoint and involve no selection.

    Returns:
        StageResult: Per-group accuracies (final and early-stopped) with their raw runs.
    """
    _check_groups(dataset, require_balanced)
    logger.info(f"Stage one ({condition or 'audit'}): {dataset.num_groups} groups x {config.n_runs} runs")
    results = _execute(plan_single_group_jobs(dataset, config, condition), config)

    final, early = {}, {}
    for group in range(dataset.num_groups):
        mine = sorted((res for res in results if res.job.group == group), key=lambda res: res.job.run)
        seeds = [res.job.seed for res in mine]
        final[group] = GroupAccuracies(
            group=group, seeds=seeds, runs=[res.curve.checkpoints[-1].per_group_test_acc[group] for res in mine])
        early[group] = GroupAccuracies(
            group=group, seeds=seeds, runs=[res.curve.best_checkpoint().per_group_test_acc[group] for res in mine])
    runs = [RunCurve(group=res.job.group, run=res.job.run, seed=res.job.seed, curve=res.curve) for res in results]
    return StageResult(stage="single_group", final=final, early_stopped=early, runs=runs)


def _overall(checkpoint: Checkpoint, weights: Dict[int, float]) -> float:
    accs = checkpoint.per_group_test_acc
    return sum(weights[group] * accs[group] for group in accs) / sum(weights[group] for group in accs)


def run_combined_protocol(dataset: GroupedDataset, config: ExperimentConfig, condition: str = "",
                          sampler_factory: Optional[SamplerFactory] = None,
                          require_balanced: bool = True) -> StageResult:
    """
    Train N models on every group together and report accuracy broken out by group.

    The early-stopped checkpoint is the one with the best overall accuracy on the reported
    held-out split, weighting groups by their held-out row counts.
    """
    _check_groups(dataset, require_balanced)
    logger.info(f"Stage two ({condition or 'audit'}): {config.n_runs} combined runs")
    results = _execute(plan_combined_jobs(dataset, config, condition, sampler_factory), config)

    groups = range(dataset.num_groups)
    seeds = [res.job.seed for res in results]
    weights = [{group: float(count) for group, count in enumerate(res.job.test_set.group_counts())}
               for res in results]
    best = [res.curve.best_checkpoint(w) for res, w in zip(results, weights)]
    last = [res.curve.checkpoints[-1] for res in results]
    final = {g: GroupAccuracies(group=g, seeds=seeds, runs=[c.per_group_test_acc[g] for c in last]) for g in groups}
    early = {g: GroupAccuracies(group=g, seeds=seeds, runs=[c.per_group_test_acc[g] for c in best]) for g in groups}
    return StageResult(
        stage="combined", final=final, early_stopped=early,
        overall_final=[_overall(c, w) for c, w in zip(last, weights)],
        overall_early_stopped=[_overall(c, w) for c, w in zip(best, weights)],
        runs=[RunCurve(group=None, run=res.job.run, seed=res.job.seed, curve=res.curve,
                       test_counts={group: int(count) for group, count in w.items()})
              for res, w in zip(results, weights)],
    )


def _pair_report(single: Dict[int, GroupAccuracies], combined: Dict[int, GroupAccuracies],
                 group_a: int, group_b: int, checkpoint: str) -> DisparityReport:
    return DisparityReport(group_a=group_a, group_b=group_b, checkpoint=checkpoint,
                           single_runs_a=single[group_a].runs, single_runs_b=single[group_b].runs,
                           combined_runs_a=combined[group_a].runs, combined_runs_b=combined[group_b].runs)


def disparity_trajectory(single: StageResult, combined: StageResult, group_a: int = 0,
                         group_b: int = 1) -> List[DisparityReport]:
    """
    Estimated and observed disparity at every combined-run checkpoint step.

    Single-group runs are read at min(step, their last step).
    """
    combined_curves = combined.curves()
    if not combined_curves:
        return []
    single_a, single_b = single.curves(group_a), single.curves(group_b)
    reports = []
    for step in combined_curves[0].curve.steps():
        def isolated(curves: List[RunCurve], group: int) -> List[float]:
            return [entry.curve.at_step(min(step, entry.curve.steps()[-1])).per_group_test_acc[group]
                    for entry in curves]

        reports.append(DisparityReport(
            group_a=group_a, group_b=group_b, checkpoint=f"step_{step}",
            single_runs_a=isolated(single_a, group_a), single_runs_b=isolated(single_b, group_b),
            combined_runs_a=[entry.curve.at_step(step).per_group_test_acc[group_a] for entry in combined_curves],
            combined_runs_b=[entry.curve.at_step(step).per_group_test_acc[group_b] for entry in combined_curves]))
    return reports


class AuditReport(BaseModel):
    condition: str = ""
    group_names: List[str]
    n_rows: int
    early_stopped: List[DisparityReport] = Field(..., description="Headline reports, one per group pair")
    final: List[DisparityReport]
    trajectory: List[DisparityReport] = Field(default_factory=list, description="Group 0 vs 1 per checkpoint step")
    single_group: StageResult
    combined: StageResult

    def report(self, group_a: int = 0, group_b: int = 1,
               checkpoint: CheckpointMode = "early_stopped") -> DisparityReport:
        for entry in self.early_stopped if checkpoint == "early_stopped" else self.final:
            if (entry.group_a, entry.group_b) == (group_a, group_b):
                return entry
            if (entry.group_a, entry.group_b) == (group_b, group_a):
                return entry.swapped()
        raise GroupError(f"No report for groups ({group_a}, {group_b})")


def prepare_audit_dataset(dataset: GroupedDataset, config: ExperimentConfig, condition: str = "") -> GroupedDataset:
    if dataset.num_groups < 2:
        raise GroupError(f"An audit needs at least 2 groups, got {dataset.num_groups}")
    if not config.protocol.balance:
        return dataset
    return balance_groups(dataset, seed=derive_seed(config.seed, f"{condition}balance", 0))


def audit(dataset: GroupedDataset, config: ExperimentConfig, condition: str = "",
          sampler_factory: Optional[SamplerFactory] = None, require_balanced: bool = True) -> AuditReport:
    """
    Two-stage disparity audit for every group pair.

    Args:
        dataset (GroupedDataset): Task with at least 2 groups; balanced first when
            protocol.balance is set and `require_balanced` is True.
        config (ExperimentConfig): Model, training recipe and protocol settings.
        condition (str): Prefix of every derived seed; distinct prefixes give
            independent seed streams.
        sampler_factory: minibatch sampler for combined runs (oversampling).
        require_balanced (bool): False waives the balance precondition (mitigation runs).

    Returns:
        AuditReport: Early-stopped and final reports, and the per-step trajectory.
    """
    if require_balanced:
        dataset = prepare_audit_dataset(dataset, config, condition)
    elif dataset.num_groups < 2:
        raise GroupError(f"An audit needs at least 2 groups, got {dataset.num_groups}")
    single = run_single_group_protocol(dataset, config, condition, require_balanced)
    combined = run_combined_protocol(dataset, config, condition, sampler_factory, require_balanced)

    pairs = [(a, b) for a in range(dataset.num_groups) for b in range(a + 1, dataset.num_groups)]
    early = [_pair_report(single.early_stopped, combined.early_stopped, a, b, "early_stopped") for a, b in pairs]
    final = [_pair_report(single.final, combined.final, a, b, "final") for a, b in pairs]
    for entry in early:
        if entry.k_ratio is None:
            logger.warning(f"{condition or 'audit'}: |d_tilde|={abs(entry.d_tilde):.4f} too small, "
                           f"k undefined for groups ({entry.group_a}, {entry.group_b})")
        logger.info(f"{condition or 'audit'} groups ({entry.group_a}, {entry.group_b}): d_tilde={entry.d_tilde:.4f} "
                    f"d={entry.d:.4f} amplified={entry.amplified}")
    return AuditReport(condition=condition, group_names=list(dataset.group_names), n_rows=dataset.n_rows,
                       early_stopped=early, final=final, trajectory=disparity_trajectory(single, combined),
                       single_group=single, combined=combined)


@dataclass
class SampledTask:
    task_id: int
    dataset: GroupedDataset
    description: str
    parameters: Dict[str, Any] = field(default_factory=dict)


class TaskSampler(Protocol):
    def sample(self, task_id: int, seed: int) -> SampledTask:
        ...


@dataclass
class TeaserTaskSampler:
    """Fixed easy group; the complex group's frequency is drawn uniformly from a grid."""

    frequency_grid: Sequence[float]
    n: int = 2000
    margin: float = 0.1
    noise: float = 0.0
    simple_frequency: float = 0.0

    def sample(self, task_id: int, seed: int) -> SampledTask:
        if not self.frequency_grid:
            raise InvalidParameterError("frequency_grid must not be empty")
        frequency = float(np.random.default_rng(seed).choice(np.asarray(self.frequency_grid, dtype=float)))
        dataset = gen_teaser_task(self.n, self.margin, frequency, self.noise, seed, self.simple_frequency)
        return SampledTask(task_id, dataset, f"teaser frequency={frequency:g}", {"frequency": frequency})


@dataclass
class StitchedPairSampler:
    """Draws two disjoint class pairs from a multi-class dataset and stitches them into one binary task."""

    dataset: GroupedDataset
    class_pool: Optional[Sequence[int]] = None

    def sample(self, task_id: int, seed: int) -> SampledTask:
        pool = list(self.class_pool) if self.class_pool is not None else list(range(self.dataset.num_classes))
        if len(set(pool)) < 4:
            raise ClassSelectionError(f"Need at least 4 distinct classes to stitch two pairs, got {sorted(set(pool))}")
        a0, a1, b0, b1 = (int(c) for c in np.random.default_rng(seed).choice(sorted(set(pool)), 4, replace=False))
        stitched = stitch_binary_task((self.dataset.class_slice(a0), self.dataset.class_slice(a1)),
                                      (self.dataset.class_slice(b0), self.dataset.class_slice(b1)), seed=seed)
        names = self.dataset.class_names
        return SampledTask(task_id, stitched, f"{names[a0]}/{names[a1]} vs {names[b0]}/{names[b1]}",
                           {"pair_a": [a0, a1], "pair_b": [b0, b1]})


class StepRecord(BaseModel):
    step: int
    d_tilde: float
    d: float
    separability: Dict[str, float]
    mean_accuracy: Optional[float] = Field(None, description="Overall combined test accuracy at this step")


class TaskRecord(BaseModel):
    task_id: int
    description: str = ""
    parameters: Dict[str, Any] = Field(default_factory=dict)
    d_tilde: float
    d: float
    separability: SeparabilityVector
    seeds: List[int] = Field(default_factory=list)
    mean_accuracy: Optional[float] = Field(
        None, description="Overall combined test accuracy at the selected checkpoint, averaged over runs")
    steps: List[StepRecord] = Field(default_factory=list, description="Same quantities at every checkpoint step")

    def at_step(self, step: int) -> "TaskRecord":
        """This record with the values of the largest recorded step not exceeding `step`."""
        eligible = [entry for entry in self.steps if entry.step <= step]
        if not eligible:
            raise InvalidParameterError(f"Task {self.task_id} has no checkpoint at or before step {step}")
        chosen = eligible[-1]
        separability = self.separability.model_copy(update={"cells": dict(chosen.separability)})
        return self.model_copy(update={"d_tilde": chosen.d_tilde, "d": chosen.d, "separability": separability,
                                       "mean_accuracy": chosen.mean_accuracy})


def separability_task(dataset: GroupedDataset, cell: str) -> GroupedDataset:
    """Binary single-group task: rows of the cell's first (group, label) vs rows of its second."""
    (group_0, label_0), (group_1, label_1) = SEPARABILITY_CELLS[cell]
    first, second = dataset.cell_indices(group_0, label_0), dataset.cell_indices(group_1, label_1)
    if first.size == 0 or second.size == 0:
        raise IncompleteProtocolError(f"Separability cell {cell} has an empty side")
    rows = np.concatenate([first, second])
    labels = np.concatenate([np.zeros(first.size, dtype=np.int64), np.ones(second.size, dtype=np.int64)])
    names = tuple(f"{dataset.group_names[g]}/{dataset.class_names[l]}" for g, l in ((group_0, label_0), (group_1, label_1)))
    return GroupedDataset(dataset.features[rows], labels, np.zeros(rows.size, dtype=np.int64),
                          class_names=names, group_names=(cell,))


def _checkpoint_of(curve: TrainingCurve, mode: CheckpointMode) -> Checkpoint:
    return curve.best_checkpoint() if mode == "early_stopped" else curve.checkpoints[-1]


def evaluate_task(task: SampledTask, config: ExperimentConfig) -> TaskRecord:
    """
    Audit one sampled task and train the dedicated binary models of its separability cells.
    """
    prefix = f"task{task.task_id}/"
    mode = config.protocol.checkpoint
    layout = config.protocol.separability_layout
    dataset = prepare_audit_dataset(task.dataset, config, prefix)
    report = audit(dataset, config, condition=prefix)
    headline = report.report(0, 1, mode)

    cells = SEPARABILITY_LAYOUTS[layout]
    jobs = []
    for cell in cells:
        cell_data = separability_task(dataset, cell)
        spec = _model_spec(config, cell_data)
        name = f"{prefix}cell/{cell}"
        for run in range(config.n_runs):
            train_set, test_set = stratified_split(cell_data, config.test_fraction,
                                                   derive_seed(config.seed, f"{name}/split", run))
            jobs.append(TrainingJob(name, run, derive_seed(config.seed, name, run), spec, config.train,
                                    train_set, test_set, group=0))
    results = _execute(jobs, config)
    curves = {cell: [res.curve for res in results if res.job.condition == f"{prefix}cell/{cell}"] for cell in cells}
    cell_runs = {cell: [_checkpoint_of(curve, mode).per_group_test_acc[0] for curve in curves[cell]] for cell in cells}
    cell_seeds = {cell: [res.job.seed for res in results if res.job.condition == f"{prefix}cell/{cell}"]
                  for cell in cells}

    combined_curves = report.combined.curves()
    steps = []
    for entry in report.trajectory:
        step = int(entry.checkpoint.split("_", 1)[1])
        separability = {cell: float(np.mean([curve.at_step(min(step, curve.steps()[-1])).per_group_test_acc[0]
                                             for curve in curves[cell]])) for cell in cells}
        accuracy = float(np.mean([_overall(run.curve.at_step(step), run.test_counts) for run in combined_curves]))
        steps.append(StepRecord(step=step, d_tilde=entry.d_tilde, d=entry.d, separability=separability,
                                mean_accuracy=accuracy))

    overall = report.combined.overall_early_stopped if mode == "early_stopped" else report.combined.overall_final
    seeds = sorted({seed for group in report.single_group.final.values() for seed in group.seeds} |
                   {entry.seed for entry in report.combined.runs})
    logger.info(f"Task {task.task_id} ({task.description}): d_tilde={headline.d_tilde:.4f} d={headline.d:.4f}")
    return TaskRecord(task_id=task.task_id, description=task.description, parameters=task.parameters,
                      d_tilde=headline.d_tilde, d=headline.d,
                      separability=separability_cells(cell_runs, layout, cell_seeds), seeds=seeds,
                      mean_accuracy=float(np.mean(overall)), steps=steps)


class AmplificationReport(BaseModel):
    condition: str = "amplify"
    m_tasks: int
    layout: str = "within_group"
    records: List[TaskRecord]
    dropped_columns: List[str] = Field(default_factory=list, description="Constant or duplicated nuisance columns")
    fit_no_intercept: RegressionResult
    fit_with_intercept: Optional[RegressionResult] = None
    k: float = Field(..., description="d_tilde coefficient of the no-intercept fit")
    k_stderr: float
    r_squared: float

    @model_validator(mode="after")
    def _check_headline(self) -> "AmplificationReport":
        if len(self.records) != self.m_tasks:
            raise ValueError(f"{len(self.records)} task records for m_tasks={self.m_tasks}")
        if self.k != self.fit_no_intercept.coefficients[D_TILDE]:
            raise ValueError("headline k must equal the d_tilde coefficient of the no-intercept fit")
        return self


def amplification_design(records: Sequence[TaskRecord], layout: str = "within_group") -> Tuple[DesignMatrix, np.ndarray]:
    """Design matrix (d_tilde, then the layout's separability cells) and the observed disparities."""
    columns: Dict[str, List[float]] = {D_TILDE: [record.d_tilde for record in records]}
    for name in SEPARABILITY_LAYOUTS[layout]:
        columns[name] = [record.separability.cells[name] for record in records]
    return DesignMatrix.from_columns(columns), np.array([record.d for record in records])


def _drop_uninformative(design: DesignMatrix) -> Tuple[DesignMatrix, List[str]]:
    keep, dropped = [], []
    for index, name in enumerate(design.names):
        column = design.values[:, index]
        duplicate = any(np.array_equal(column, design.values[:, kept]) for kept in keep)
        if name != D_TILDE and (np.ptp(column) == 0 or duplicate):
            dropped.append(name)
        else:
            keep.append(index)
    if dropped:
        logger.warning(f"Dropping nuisance columns {dropped}: constant across tasks or duplicated")
    return DesignMatrix(tuple(design.names[i] for i in keep), design.values[:, keep]), dropped


def fit_amplification(records: Sequence[TaskRecord], layout: str = "within_group",
                      condition: str = "amplify") -> AmplificationReport:
    """
    Regress observed on estimated disparity with separability nuisance columns.

    Both the no-intercept fit (headline k) and the intercept fit are reported.

    Raises:
        SingularDesignError: the remaining columns are collinear (e.g. d_tilde constant
            across tasks); sample tasks over a wider difficulty range.
    """
    design, observed = amplification_design(records, layout)
    design, dropped = _drop_uninformative(design)
    try:
        headline = ols_fit(design, observed, intercept=False)
        with_intercept = ols_fit(design, observed, intercept=True)
    except SingularDesignError as e:
        raise e.with_context(condition=condition, tasks=len(records))
    k = headline.coefficients[D_TILDE]
    logger.info(f"{condition}: k={k:.3f} +/- {headline.standard_errors[D_TILDE]:.3f} "
                f"(R^2={headline.r_squared:.3f}, {len(records)} tasks)")
    return AmplificationReport(condition=condition, m_tasks=len(records), layout=layout, records=list(records),
                               dropped_columns=dropped, fit_no_intercept=headline, fit_with_intercept=with_intercept,
                               k=k, k_stderr=headline.standard_errors[D_TILDE], r_squared=headline.r_squared)


def amplification_sweep(task_sampler: TaskSampler, m_tasks: int, config: ExperimentConfig,
                        evaluate: Callable[[SampledTask, ExperimentConfig], TaskRecord] = evaluate_task,
                        condition: str = "amplify") -> AmplificationReport:
    """
    Sample `m_tasks` tasks, measure (d_tilde, d, separability) on each, and fit the amplification regression.

    Args:
        task_sampler: yields a SampledTask for (task id, derived seed).
        m_tasks (int): Task count; must exceed 6.
        config (ExperimentConfig): Protocol settings shared by every task.
        evaluate: per-task measurement; replaceable with a planted evaluator.
    """
    if m_tasks < MIN_TASKS:
        raise InvalidParameterError(f"m_tasks must be > 6 to fit a 5-column design with slack, got {m_tasks}")
    records = []
    for task_id in range(m_tasks):
        task = task_sampler.sample(task_id, derive_seed(config.seed, "task", task_id))
        records.append(evaluate(task, config))
    return fit_amplification(records, config.protocol.separability_layout, condition)


class SweepPoint(BaseModel):
    value: float
    k: float
    k_stderr: float
    r_squared: float
    k_with_intercept: Optional[float] = None
    n_tasks: int
    mean_accuracy: Optional[float] = Field(None, description="Mean over tasks of the per-task accuracy")
    accuracy_std: Optional[float] = Field(None, description="Sample std over tasks; None below 2 tasks")


class SweepResult(BaseModel):
    variable: Literal["width", "step", "weight_decay", "grad_penalty_c"]
    grid: List[float]
    points: List[SweepPoint]
    reports: List[AmplificationReport] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_grid(self) -> "SweepResult":
        if any(later <= earlier for earlier, later in zip(self.grid, self.grid[1:])):
            raise ValueError(f"sweep grid must be strictly increasing, got {self.grid}")
        return self


def _accuracy_summary(records: Sequence[TaskRecord]) -> Dict[str, Optional[float]]:
    accuracies = [record.mean_accuracy for record in records if record.mean_accuracy is not None]
    if not accuracies:
        return {"mean_accuracy": None, "accuracy_std": None}
    std = float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else None
    return {"mean_accuracy": float(np.mean(accuracies)), "accuracy_std": std}


def _sweep_point(value: float, report: AmplificationReport) -> SweepPoint:
    intercept_fit = report.fit_with_intercept
    return SweepPoint(value=value, k=report.k, k_stderr=report.k_stderr, r_squared=report.r_squared,
                      k_with_intercept=intercept_fit.coefficients[D_TILDE] if intercept_fit else None,
                      n_tasks=len(report.records), **_accuracy_summary(report.records))


def config_for(variable: str, value: float, config: ExperimentConfig) -> ExperimentConfig:
    """Base config with one design variable set to `value`."""
    if variable == "width":
        depth = len(config.model.build(1).hidden_widths)
        model = config.model.model_copy(update={"preset": None, "hidden_widths": [int(value)] * depth})
        return config.model_copy(update={"model": model})
    if variable == "weight_decay":
        return config.model_copy(update={"train": config.train.model_copy(update={"weight_decay": float(value)})})
    if variable == "grad_penalty_c":
        current = config.train.grad_penalty
        mode = "finite_difference" if config.model.activation == "relu" else "exact"
        penalty = current.model_copy(update={"c": float(value)}) if current else GradPenalty(c=float(value), mode=mode)
        return config.model_copy(update={"train": config.train.model_copy(update={"grad_penalty": penalty})})
    raise InvalidParameterError(f"Unknown sweep variable '{variable}'")


def common_steps(records: Sequence[TaskRecord]) -> List[int]:
    """Checkpoint steps recorded for every task."""
    shared = set.intersection(*(set(entry.step for entry in record.steps) for record in records)) if records else set()
    return sorted(shared)


def design_sweep(variable: str, grid: Optional[Sequence[float]], config: ExperimentConfig,
                 task_sampler: TaskSampler, m_tasks: Optional[int] = None,
                 evaluate: Callable[[SampledTask, ExperimentConfig], TaskRecord] = evaluate_task) -> SweepResult:
    """
    Amplification factor as a function of one design decision.

    For `step` the tasks are trained once and k is refit at every grid step from the
    recorded checkpoints (every common checkpoint step when `grid` is None).
    Other variables fall back to DEFAULT_SWEEP_GRIDS when `grid` is None.
    """
    m_tasks = m_tasks or config.sweep.m_tasks
    if variable not in ("width", "step", "weight_decay", "grad_penalty_c"):
        raise InvalidParameterError(f"Unknown sweep variable '{variable}'")
    if grid is None:
        grid = DEFAULT_SWEEP_GRIDS[variable]
    if grid is not None:
        values = [float(value) for value in grid]
        if not values:
            raise InvalidParameterError("Sweep grid must not be empty")
        if any(later <= earlier for earlier, later in zip(values, values[1:])):
            raise InvalidParameterError(f"Sweep grid must be strictly increasing, got {values}")
    layout = config.protocol.separability_layout

    if variable == "step":
        base = amplification_sweep(task_sampler, m_tasks, config, evaluate, condition="sweep/step")
        steps = [int(value) for value in grid] if grid is not None else common_steps(base.records)
        points = []
        for step in steps:
            try:
                refit = fit_amplification([record.at_step(step) for record in base.records], layout,
                                          condition=f"sweep/step={step}")
            except LabError as e:
                raise e.with_context(variable=variable, value=step)
            points.append(_sweep_point(step, refit))
        return SweepResult(variable=variable, grid=[float(step) for step in steps], points=points, reports=[base])

    points, reports = [], []
    for value in grid:
        try:
            report = amplification_sweep(task_sampler, m_tasks, config_for(variable, value, config), evaluate,
                                         condition=f"sweep/{variable}={value:g}")
        except LabError as e:
            raise e.with_context(variable=variable, value=value)
        points.append(_sweep_point(float(value), report))
        reports.append(report)
    return SweepResult(variable=variable, grid=[float(value) for value in grid], points=points, reports=reports)


class MitigationStrategy(BaseModel):
    kind: Literal["add_data", "oversample"]
    target_group: int = 1
    factor: float = Field(1.6, ge=1.0)
    weight: float = Field(2.0, gt=0)


class PairDelta(BaseModel):
    group_a: int
    group_b: int
    d_before: float
    d_after: float
    delta: float = Field(..., description="d_after - d_before")
    d_tilde_before: float
    d_tilde_after: float


class MitigationReport(BaseModel):
    strategy: MitigationStrategy
    checkpoint: str
    before: AuditReport
    after: AuditReport
    deltas: List[PairDelta]


def mitigation_experiment(dataset: GroupedDataset, reserve: Optional[GroupedDataset], strategy: MitigationStrategy,
                          config: ExperimentConfig) -> MitigationReport:
    """
    Audit a baseline and a mitigated configuration with the same seed streams.

    add_data grows the target group from `reserve`; oversample weights the target
    group's rows in the combined runs' minibatch sampler.
    """
    condition = "mitigation/"
    baseline = prepare_audit_dataset(dataset, config, condition)
    if not 0 <= strategy.target_group < baseline.num_groups:
        raise GroupError(f"Unknown target group {strategy.target_group}")
    if strategy.kind == "add_data" and reserve is None:
        raise InvalidParameterError("add_data needs a reserve dataset")
    before = audit(baseline, config, condition=condition)

    if strategy.kind == "add_data":
        grown = augment_group(baseline, reserve, strategy.target_group, strategy.factor,
                              seed=derive_seed(config.seed, f"{condition}augment", 0))
        after = audit(grown, config, condition=condition, require_balanced=False)
    else:
        def factory(train_set: GroupedDataset, seed: int) -> Sampler:
            return oversample_weights(train_set, strategy.target_group, strategy.weight, seed=seed)

        after = audit(baseline, config, condition=condition, sampler_factory=factory)

    mode = config.protocol.checkpoint
    deltas = []
    for entry in before.early_stopped if mode == "early_stopped" else before.final:
        mitigated = after.report(entry.group_a, entry.group_b, mode)
        deltas.append(PairDelta(group_a=entry.group_a, group_b=entry.group_b, d_before=entry.d, d_after=mitigated.d,
                                delta=mitigated.d - entry.d, d_tilde_before=entry.d_tilde,
                                d_tilde_after=mitigated.d_tilde))
        logger.info(f"Mitigation {strategy.kind} groups ({entry.group_a}, {entry.group_b}): "
                    f"d {entry.d:.4f} -> {mitigated.d:.4f}")
    return MitigationReport(strategy=strategy, checkpoint=mode, before=before, after=after, deltas=deltas)


def split_reserve(dataset: GroupedDataset, group: int, fraction: float,
                  seed: int = 0) -> Tuple[GroupedDataset, GroupedDataset]:
    """Move `fraction` of each label of `group` out of `dataset` into a reserve."""
    rng = np.random.default_rng(seed)
    reserved = []
    for label in range(dataset.num_classes):
        cell = dataset.cell_indices(group, label)
        take = int(np.floor(fraction * cell.size + 0.5))
        if take:
            reserved.append(rng.choice(cell, take, replace=False))
    chosen = np.sort(np.concatenate(reserved)) if reserved else np.zeros(0, dtype=np.int64)
    remaining = np.setdiff1d(np.arange(dataset.n_rows), chosen)
    return dataset.subset(remaining), dataset.subset(chosen)


class PairwiseReport(BaseModel):
    class_names: List[str]
    model_labels: List[str]
    model_fingerprints: List[str]
    class_pairs: List[Tuple[int, int]]
    matrices: List[List[List[float]]] = Field(..., description="Mean masked pair accuracy per model")
    accuracy_ranks: List[List[float]]
    kendall_tau: List[List[Optional[float]]] = Field(..., description="Model x model tau-b; None when undefined")
    cosine_distances: List[float]
    distance_ranks: List[float]
    pls: PlsModel
    n_runs: int


def _model_label(index: int, spec: MlpSpec) -> str:
    widths = "x".join(str(width) for width in spec.hidden_widths) or "linear"
    return f"m{index}:{widths}-{spec.activation}"


def pairwise_difficulty_experiment(dataset: GroupedDataset, specs: Sequence[MlpSpec],
                                   config: ExperimentConfig) -> PairwiseReport:
    """
    Pairwise class difficulty across architectures.

    Each spec is trained on N shared splits; its masked pair accuracies are averaged
    and ranked, models are compared by Kendall tau-b, and PLS relates the ranked
    class-mean cosine distances to the rank-accuracy matrix. Run seeds depend on the
    spec fingerprint, so a spec listed twice trains identical models.
    """
    if dataset.num_classes < 3:
        raise InvalidParameterError(f"Pairwise analysis needs at least 3 classes, got {dataset.num_classes}")
    if len(specs) < 2:
        raise InvalidParameterError(f"Pairwise analysis needs at least 2 model specs, got {len(specs)}")
    splits = _splits(dataset, config, "pairwise/")
    jobs = []
    for index, spec in enumerate(specs):
        name = f"pairwise/{spec.fingerprint()}"
        for run, (train_set, test_set) in enumerate(splits):
            jobs.append(TrainingJob(f"{name}#{index}", run, derive_seed(config.seed, name, run), spec, config.train,
                                    train_set, test_set))
    results = _execute(jobs, config)

    pairs = class_pairs(dataset.num_classes)
    matrices, ranks = [], []
    for index, spec in enumerate(specs):
        mine = [res for res in results if res.job.condition == f"pairwise/{spec.fingerprint()}#{index}"]
        matrix = np.mean([pairwise_difficulty_matrix(res.model, res.job.test_set) for res in mine], axis=0)
        matrices.append(matrix)
        ranks.append(rank_transform(upper_triangle(matrix)))

    taus = [[None] * len(specs) for _ in specs]
    for i in range(len(specs)):
        for j in range(len(specs)):
            tau = kendall_tau(upper_triangle(matrices[i]), upper_triangle(matrices[j]))
            taus[i][j] = None if np.isnan(tau) else tau

    distances = [cosine_distance_class_means(dataset, i, j) for i, j in pairs]
    distance_ranks = rank_transform(distances)
    pls = pls1_fit(np.column_stack(ranks), distance_ranks)
    logger.info(f"Pairwise analysis over {len(pairs)} class pairs: PLS R^2={pls.r_squared:.3f}")
    return PairwiseReport(
        class_names=list(dataset.class_names), model_labels=[_model_label(i, s) for i, s in enumerate(specs)],
        model_fingerprints=[spec.fingerprint() for spec in specs], class_pairs=pairs,
        matrices=[matrix.tolist() for matrix in matrices], accuracy_ranks=[rank.tolist() for rank in ranks],
        kendall_tau=taus, cosine_distances=distances, distance_ranks=distance_ranks.tolist(), pls=pls,
        n_runs=config.n_runs)


def load_task_dataset(config: ExperimentConfig) -> GroupedDataset:
    """The task described by config.task: generated, read from CSV, or stitched from IDX class pairs."""
    source = config.task
    if source.kind == "generator":
        return generate_task(source.generator)
    if source.kind == "csv":
        return GroupedDataset.load_csv(source.path)
    full = load_idx(source.images_path, source.labels_path, source.class_names)
    a0, a1 = source.pair_a
    b0, b1 = source.pair_b
    return stitch_binary_task((full.class_slice(a0), full.class_slice(a1)),
                              (full.class_slice(b0), full.class_slice(b1)),
                              seed=derive_seed(config.seed, "task/stitch", 0))


def task_sampler_for(config: ExperimentConfig) -> TaskSampler:
    if config.sweep.task_sampler == "teaser":
        generator = config.task.generator
        return TeaserTaskSampler(frequency_grid=config.sweep.frequency_grid, n=generator.n, margin=generator.margin,
                                 noise=generator.noise, simple_frequency=generator.simple_frequency)
    if config.task.kind == "idx":
        source = load_idx(config.task.images_path, config.task.labels_path, config.task.class_names)
    elif config.task.kind == "csv":
        source = GroupedDataset.load_csv(config.task.path)
    else:
        raise InvalidParameterError("The stitched task sampler needs a multi-class csv or idx task source")
    return StitchedPairSampler(source, config.sweep.class_pool)


def mitigation_inputs(config: ExperimentConfig) -> Tuple[GroupedDataset, GroupedDataset]:
    """Task plus a reserve of extra target-group rows (a fresh draw for generated tasks)."""
    settings = config.mitigation
    dataset = load_task_dataset(config)
    if config.task.kind == "generator":
        fresh = config.task.generator.model_copy(update={"seed": derive_seed(config.seed, "mitigation/reserve", 0)})
        return dataset, generate_task(fresh).group_slice(settings.target_group)
    fraction = (settings.factor - 1.0) / settings.factor
    return split_reserve(dataset, settings.target_group, fraction, seed=derive_seed(config.seed, "mitigation/reserve", 0))


def pairwise_dataset(config: ExperimentConfig) -> GroupedDataset:
    settings = config.pairwise
    if config.task.kind == "idx":
        return load_idx(config.task.images_path, config.task.labels_path, config.task.class_names)
    if config.task.kind == "csv":
        return GroupedDataset.load_csv(config.task.path)
    return gen_class_blobs(settings.n_per_class, settings.num_classes, settings.dim, settings.spread,
                           seed=derive_seed(config.seed, "pairwise/data", 0))
