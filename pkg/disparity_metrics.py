"""
Disparity and difficulty measurements.

Group accuracies, estimated vs observed disparity and their ratio, masked pairwise
class accuracy, the separability cells used as nuisance regressors, rank statistics
and the cosine distance between class means.
"""

import logging
import math
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.distance import cosine
from scipy.stats import kendalltau, rankdata

from grouped_datasets import GroupedDataset
from lab_errors import (
    ClassSelectionError,
    DegenerateMeanError,
    EmptyGroupError,
    IncompleteProtocolError,
    InvalidParameterError,
    ShapeError,
)
from mlp_network import Mlp, forward

logger = logging.getLogger("amplification-lab.metrics")

# below this |d_tilde| the ratio d / d_tilde is reported as undefined
K_DEGENERACY_THRESHOLD = 0.005

Model = Union[Mlp, Callable[[np.ndarray], np.ndarray]]
SeparabilityLayout = Literal["within_group", "cross_group"]

# (group, label) endpoints of each separability cell; group a = 0, group b = 1
SEPARABILITY_CELLS: Dict[str, Tuple[Tuple[int, int], Tuple[int, int]]] = {
    "s_a0_a1": ((0, 0), (0, 1)),
    "s_b0_b1": ((1, 0), (1, 1)),
    "s_a0_b1": ((0, 0), (1, 1)),
    "s_a1_b0": ((0, 1), (1, 0)),
    "s_a0_b0": ((0, 0), (1, 0)),
    "s_a1_b1": ((0, 1), (1, 1)),
}
SEPARABILITY_LAYOUTS: Dict[str, Tuple[str, ...]] = {
    "within_group": ("s_a0_a1", "s_b0_b1", "s_a0_b1", "s_a1_b0"),
    "cross_group": ("s_a0_b0", "s_a1_b1", "s_a0_b1", "s_a1_b0"),
}


def mean_and_stderr(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and standard error of the mean; the error is undefined (None) for a single value."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise EmptyGroupError("No values to average")
    if array.size < 2:
        return float(array[0]), None
    return float(array.mean()), float(array.std(ddof=1) / math.sqrt(array.size))


class GroupAccuracies(BaseModel):
    group: int
    runs: List[float] = Field(..., description="Test accuracy of every run, in run order")
    seeds: List[int] = Field(default_factory=list, description="Training seed of every run")
    mean: float = 0.0
    stderr: Optional[float] = None

    @model_validator(mode="after")
    def _summarize(self) -> "GroupAccuracies":
        self.mean, self.stderr = mean_and_stderr(self.runs)
        return self


class DisparityReport(BaseModel):
    """
    Estimated vs observed disparity for one ordered group pair.

    Raw per-run accuracies are stored; every summary field is recomputed from them on
    validation, so a deserialized report is always self-consistent.
    """

    group_a: int
    group_b: int
    checkpoint: str = Field("final", description="final, early_stopped or step_<n>")
    single_runs_a: List[float]
    single_runs_b: List[float]
    combined_runs_a: List[float]
    combined_runs_b: List[float]

    acc_single_a: float = 0.0
    acc_single_b: float = 0.0
    acc_combined_a: float = 0.0
    acc_combined_b: float = 0.0
    stderr_single_a: Optional[float] = None
    stderr_single_b: Optional[float] = None
    stderr_combined_a: Optional[float] = None
    stderr_combined_b: Optional[float] = None
    d_tilde: float = 0.0
    d: float = 0.0
    k_ratio: Optional[float] = None
    gap: float = Field(0.0, description="Mean paired per-run d - d_tilde")
    gap_stderr: Optional[float] = None
    amplified: bool = False

    @model_validator(mode="after")
    def _recompute(self) -> "DisparityReport":
        if len(self.single_runs_a) != len(self.single_runs_b) or \
                len(self.combined_runs_a) != len(self.combined_runs_b):
            raise IncompleteProtocolError("Both groups need the same number of runs per stage")
        self.acc_single_a, self.stderr_single_a = mean_and_stderr(self.single_runs_a)
        self.acc_single_b, self.stderr_single_b = mean_and_stderr(self.single_runs_b)
        self.acc_combined_a, self.stderr_combined_a = mean_and_stderr(self.combined_runs_a)
        self.acc_combined_b, self.stderr_combined_b = mean_and_stderr(self.combined_runs_b)
        self.d_tilde = estimated_disparity(self.acc_single_a, self.acc_single_b)
        self.d = observed_disparity(self.acc_combined_a, self.acc_combined_b)
        self.k_ratio = amplification_ratio(self.d, self.d_tilde)

        runs = min(len(self.single_runs_a), len(self.combined_runs_a))
        per_run_gap = [(self.combined_runs_a[r] - self.combined_runs_b[r]) -
                       (self.single_runs_a[r] - self.single_runs_b[r]) for r in range(runs)]
        self.gap, self.gap_stderr = mean_and_stderr(per_run_gap)
        self.amplified = _is_amplified(self.d, self.d_tilde, self.gap, self.gap_stderr)
        return self

    def swapped(self) -> "DisparityReport":
        return DisparityReport(group_a=self.group_b, group_b=self.group_a, checkpoint=self.checkpoint,
                               single_runs_a=self.single_runs_b, single_runs_b=self.single_runs_a,
                               combined_runs_a=self.combined_runs_b, combined_runs_b=self.combined_runs_a)


def _is_amplified(d: float, d_tilde: float, gap: float, gap_stderr: Optional[float]) -> bool:
    # amplification = the combined model widens the gap in the direction of the isolated gap
    orientation = np.sign(d_tilde) if d_tilde != 0 else np.sign(d)
    if orientation == 0:
        return False
    if gap_stderr is None:
        return bool(orientation * (d - d_tilde) > 0)
    return bool(orientation * gap > 2.0 * gap_stderr)


class SeparabilityVector(BaseModel):
    layout: SeparabilityLayout = "within_group"
    cells: Dict[str, float] = Field(..., description="Mean binary accuracy per separability cell")
    run_counts: Dict[str, int] = Field(default_factory=dict)
    seeds: Dict[str, List[int]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_cells(self) -> "SeparabilityVector":
        missing = [name for name in SEPARABILITY_LAYOUTS[self.layout] if name not in self.cells]
        if missing:
            raise IncompleteProtocolError(f"Separability cells {missing} are missing")
        for name, value in self.cells.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"separability {name}={value} outside [0, 1]")
        return self

    def column_names(self) -> List[str]:
        return list(SEPARABILITY_LAYOUTS[self.layout])

    def values(self) -> List[float]:
        """Cell values in design-matrix column order."""
        return [self.cells[name] for name in self.column_names()]


def _logits(model: Model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, Mlp):
        return forward(model, x)
    return np.asarray(model(x), dtype=np.float64)


def group_accuracy(model: Model, dataset: GroupedDataset, group: Optional[int] = None) -> float:
    """
    Fraction of rows whose argmax prediction equals the label (ties go to the lowest class id).

    Args:
        model: an Mlp or any callable returning an (n, K) logit array.
        dataset (GroupedDataset): Rows to score.
        group (Optional[int]): restrict to one group's rows.

    Raises:
        EmptyGroupError: no rows left after filtering.
    """
    mask = np.ones(dataset.n_rows, dtype=bool) if group is None else dataset.groups == group
    if not mask.any():
        raise EmptyGroupError(f"No rows for group {group}" if group is not None else "Dataset is empty")
    predictions = np.argmax(_logits(model, dataset.features[mask]), axis=1)
    return float(np.mean(predictions == dataset.labels[mask]))


def estimated_disparity(acc_alpha_isolated: float, acc_beta_isolated: float) -> float:
    """Signed accuracy gap of two groups each trained and evaluated in isolation."""
    return float(acc_alpha_isolated - acc_beta_isolated)


def observed_disparity(acc_alpha_combined: float, acc_beta_combined: float) -> float:
    """Signed accuracy gap of two groups on one model trained on both."""
    return float(acc_alpha_combined - acc_beta_combined)


def amplification_ratio(d: float, d_tilde: float, threshold: float = K_DEGENERACY_THRESHOLD) -> Optional[float]:
    """d / d_tilde, or None when |d_tilde| is below the degeneracy threshold."""
    if abs(d_tilde) < threshold:
        return None
    return float(d / d_tilde)


def _masked_accuracy(logits: np.ndarray, labels: np.ndarray, class_i: int, class_j: int) -> float:
    low, high = sorted((class_i, class_j))
    mask = (labels == low) | (labels == high)
    pair_logits = logits[mask]
    predictions = np.where(pair_logits[:, high] > pair_logits[:, low], high, low)
    return float(np.mean(predictions == labels[mask]))


def _check_classes_present(dataset: GroupedDataset, classes: Sequence[int]) -> None:
    counts = dataset.label_histogram()
    absent = [label for label in classes if not 0 <= label < dataset.num_classes or counts[label] == 0]
    if absent:
        raise ClassSelectionError(f"Classes {absent} are not present in the dataset")


def masked_pair_accuracy(model: Model, dataset: GroupedDataset, class_i: int, class_j: int) -> float:
    """
    Two-class accuracy with every other output masked before the argmax.

    Only rows labeled class_i or class_j are scored; ties go to the lower class id.
    """
    _check_classes_present(dataset, [class_i, class_j])
    if class_i == class_j:
        raise ClassSelectionError(f"Need two distinct classes, got {class_i} twice")
    return _masked_accuracy(_logits(model, dataset.features), dataset.labels, class_i, class_j)


def pairwise_difficulty_matrix(model: Model, dataset: GroupedDataset) -> np.ndarray:
    """Symmetric (K, K) matrix of masked pair accuracies; the diagonal is 1 by convention."""
    num_classes = dataset.num_classes
    if num_classes < 2:
        raise InvalidParameterError(f"Need at least 2 classes, got {num_classes}")
    _check_classes_present(dataset, range(num_classes))
    logits = _logits(model, dataset.features)
    matrix = np.ones((num_classes, num_classes))
    for i, j in class_pairs(num_classes):
        matrix[i, j] = matrix[j, i] = _masked_accuracy(logits, dataset.labels, i, j)
    return matrix


def class_pairs(num_classes: int) -> List[Tuple[int, int]]:
    """All (i, j) with i < j, row-major."""
    return [(i, j) for i in range(num_classes) for j in range(i + 1, num_classes)]


def upper_triangle(matrix: np.ndarray) -> np.ndarray:
    """The m(m-1)/2 informative entries of a pairwise matrix, in class_pairs order."""
    rows, cols = np.triu_indices(matrix.shape[0], k=1)
    return np.asarray(matrix)[rows, cols]


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Tie-corrected Kendall tau-b.

    Returns NaN when either vector is constant (no ordered pairs to compare).

    Raises:
        ShapeError: different lengths, or fewer than 2 entries.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"Kendall tau needs equal lengths, got {a.size} and {b.size}")
    if a.size < 2:
        raise ShapeError(f"Kendall tau needs at least 2 entries, got {a.size}")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(kendalltau(a, b, variant="b").statistic)


def cosine_distance_class_means(dataset: GroupedDataset, class_i: int, class_j: int) -> float:
    """1 - cos(mean_i, mean_j) over the raw features of the two classes."""
    _check_classes_present(dataset, [class_i, class_j])
    means = []
    for label in (class_i, class_j):
        mean = dataset.features[dataset.labels == label].mean(axis=0)
        if not np.linalg.norm(mean) > 0:
            raise DegenerateMeanError(f"Class {label} has a zero mean vector")
        means.append(mean)
    return float(np.clip(cosine(means[0], means[1]), 0.0, 2.0))


def separability_cells(cell_runs: Mapping[str, Sequence[float]], layout: SeparabilityLayout = "within_group",
                       seeds: Optional[Mapping[str, Sequence[int]]] = None) -> SeparabilityVector:
    """
    Assemble separability cells from the per-run binary accuracies of dedicated cell trainings.

    Raises:
        IncompleteProtocolError: a cell of the layout is missing or has no runs.
    """
    if layout not in SEPARABILITY_LAYOUTS:
        raise InvalidParameterError(f"Unknown separability layout '{layout}'")
    names = SEPARABILITY_LAYOUTS[layout]
    missing = [name for name in names if not cell_runs.get(name)]
    if missing:
        raise IncompleteProtocolError(f"No runs recorded for separability cells {missing}")
    seeds = seeds or {}
    return SeparabilityVector(
        layout=layout,
        cells={name: mean_and_stderr(cell_runs[name])[0] for name in names},
        run_counts={name: len(cell_runs[name]) for name in names},
        seeds={name: [int(seed) for seed in seeds.get(name, [])] for name in names},
    )


def rank_transform(values: Sequence[float]) -> np.ndarray:
    """Ranks 1..n; ties share the average of their positions."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ShapeError("Cannot rank an empty vector")
    return rankdata(values, method="average")
