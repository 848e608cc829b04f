"""
Regression machinery: ordinary least squares with standard errors and R^2, and
single-component partial least squares.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.linalg import qr, solve_triangular

from lab_errors import (
    DegenerateResponseError,
    DegreesOfFreedomError,
    InvalidParameterError,
    SchemaError,
    ShapeError,
    SingularDesignError,
)

logger = logging.getLogger("amplification-lab.stats")

# pivots below this fraction of the largest pivot count as linearly dependent
PIVOT_TOLERANCE = 1e-10
CONDITION_WARNING = 1e8
INTERCEPT = "intercept"


@dataclass(frozen=True)
class DesignMatrix:
    """Named regressor columns, one row per observation."""

    names: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        names = tuple(self.names)
        if values.ndim != 2:
            raise ShapeError(f"Design matrix must be 2-D, got shape {values.shape}")
        if len(names) != values.shape[1]:
            raise SchemaError(f"{len(names)} column names for {values.shape[1]} columns")
        if len(set(names)) != len(names):
            raise SchemaError(f"Column names must be unique, got {list(names)}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("Design matrix contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence[float]]) -> "DesignMatrix":
        lengths = {name: len(column) for name, column in columns.items()}
        if len(set(lengths.values())) > 1:
            raise ShapeError(f"Columns have different lengths: {lengths}")
        n_rows = next(iter(lengths.values()), 0)
        values = np.column_stack([np.asarray(column, dtype=np.float64) for column in columns.values()]) \
            if columns else np.zeros((n_rows, 0))
        return cls(tuple(columns), values)

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_columns(self) -> int:
        return int(self.values.shape[1])

    def column(self, name: str) -> np.ndarray:
        if name not in self.names:
            raise SchemaError(f"No column named '{name}' in {list(self.names)}")
        return self.values[:, self.names.index(name)]

    def with_intercept(self) -> "DesignMatrix":
        if INTERCEPT in self.names:
            raise SchemaError(f"Design already has an '{INTERCEPT}' column")
        return DesignMatrix((INTERCEPT, *self.names), np.column_stack([np.ones(self.n_rows), self.values]))


class RegressionResult(BaseModel):
    names: List[str] = Field(..., description="Column order of the fitted design, intercept first if present")
    intercept: bool = False
    coefficients: Dict[str, float]
    standard_errors: Dict[str, float]
    t_values: Dict[str, Optional[float]] = Field(default_factory=dict)
    r_squared: float
    residuals: List[float]
    fitted: List[float] = Field(default_factory=list)
    sigma2: float = Field(0.0, description="RSS / (n - p)")
    condition_number: float = 0.0
    n: int
    p: int

    def coefficient_vector(self) -> np.ndarray:
        return np.array([self.coefficients[name] for name in self.names])

    def regressors(self) -> List[str]:
        return [name for name in self.names if name != INTERCEPT]

    def table(self) -> List[Dict[str, object]]:
        """(name, estimate, stderr, t) rows in design column order."""
        return [{"name": name, "estimate": self.coefficients[name], "stderr": self.standard_errors[name],
                 "t_value": self.t_values.get(name)} for name in self.names]


class PlsModel(BaseModel):
    x_weights: List[float] = Field(..., description="Unit-norm weight vector of the single component")
    x_loadings: List[float]
    y_loading: float
    x_mean: List[float]
    y_mean: float
    r_squared: float
    n: int
    column_names: Optional[List[str]] = None


def _r_squared(y: np.ndarray, rss: float, centered: bool) -> float:
    """R^2 against the centered (with intercept) or raw (without) total sum of squares."""
    reference = y - y.mean() if centered else y
    tss = float(reference @ reference)
    scale = max(1.0, float(y @ y))
    if tss <= 1e-24 * scale:
        return 1.0 if rss <= 1e-24 * scale else 0.0
    return float(1.0 - rss / tss)


def ols_fit(design: DesignMatrix, y: Sequence[float], intercept: bool = False) -> RegressionResult:
    """
    Least squares through a column-pivoted QR factorization.

    Args:
        design (DesignMatrix): Regressor columns (no intercept column).
        y: Response, one value per design row.
        intercept (bool): prepend a column of ones.

    Returns:
        RegressionResult: Coefficients, standard errors from sigma^2 (X^T X)^-1 with
        sigma^2 = RSS / (n - p), and R^2 (uncentered without an intercept).

    Raises:
        DegreesOfFreedomError: n <= p.
        SingularDesignError: a pivot falls below 1e-10 of the largest; names the dependent columns.
    """
    design = design.with_intercept() if intercept else design
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    matrix = design.values
    n, p = matrix.shape
    if y.shape[0] != n:
        raise ShapeError(f"Response has {y.shape[0]} values for {n} design rows")
    if not np.all(np.isfinite(y)):
        raise InvalidParameterError("Response contains non-finite values")
    if n <= p:
        raise DegreesOfFreedomError(f"Need more rows than columns, got n={n}, p={p}")

    q, r, pivots = qr(matrix, mode="economic", pivoting=True)
    pivot_sizes = np.abs(np.diag(r))
    rank = int(np.sum(pivot_sizes > PIVOT_TOLERANCE * pivot_sizes[0])) if p else 0
    if rank < p:
        dependent = [design.names[index] for index in pivots[rank:]]
        raise SingularDesignError(
            f"Design is rank deficient ({rank} of {p}); columns {dependent} depend linearly on the others. "
            "Sample tasks over a wider difficulty range so the columns vary independently",
            dependent_columns=dependent)

    beta = np.empty(p)
    beta[pivots] = solve_triangular(r, q.T @ y)
    fitted = matrix @ beta
    residuals = y - fitted
    rss = float(residuals @ residuals)
    sigma2 = rss / (n - p)

    r_inverse = solve_triangular(r, np.eye(p))
    covariance = np.empty((p, p))
    covariance[np.ix_(pivots, pivots)] = r_inverse @ r_inverse.T
    stderr = np.sqrt(sigma2 * np.diag(covariance))
    condition = float(np.linalg.cond(matrix))
    if condition > CONDITION_WARNING:
        logger.warning(f"Design condition number {condition:.3g} exceeds {CONDITION_WARNING:.0e}; "
                       f"coefficients of {list(design.names)} are poorly identified")

    names = list(design.names)
    return RegressionResult(
        names=names,
        intercept=intercept,
        coefficients={name: float(value) for name, value in zip(names, beta)},
        standard_errors={name: float(value) for name, value in zip(names, stderr)},
        t_values={name: (float(b / s) if s > 0 else None) for name, b, s in zip(names, beta, stderr)},
        r_squared=_r_squared(y, rss, centered=intercept),
        residuals=residuals.tolist(),
        fitted=fitted.tolist(),
        sigma2=sigma2,
        condition_number=condition,
        n=n,
        p=p,
    )


def pls1_fit(x: Union[np.ndarray, DesignMatrix], y: Sequence[float], components: int = 1) -> PlsModel:
    """
    Single-response partial least squares with one component.

    The weight is X_c^T y_c normalized to unit length (the direction of maximal
    covariance); scores t = X_c w; y is regressed on t for the reported R^2.

    Raises:
        DegenerateResponseError: y has zero variance.
    """
    if components != 1:
        raise InvalidParameterError(f"Only a single PLS component is supported, got {components}")
    column_names = list(x.names) if isinstance(x, DesignMatrix) else None
    x = np.asarray(x.values if isinstance(x, DesignMatrix) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"X of shape {x.shape} does not match {y.shape[0]} responses")
    if x.shape[0] < 2:
        raise DegreesOfFreedomError("PLS needs at least 2 rows")

    x_mean, y_mean = x.mean(axis=0), float(y.mean())
    x_centered, y_centered = x - x_mean, y - y_mean
    tss = float(y_centered @ y_centered)
    if tss <= 1e-24 * max(1.0, float(y @ y)):
        raise DegenerateResponseError("Response has zero variance; PLS direction is undefined")

    weights = x_centered.T @ y_centered
    norm = float(np.linalg.norm(weights))
    if norm <= 1e-12 * math.sqrt(tss) * max(1.0, float(np.linalg.norm(x_centered))):
        # no covariance with any column
        weights = np.zeros(x.shape[1])
        weights[0] = 1.0
    else:
        weights = weights / norm

    scores = x_centered @ weights
    score_norm = float(scores @ scores)
    if score_norm > 0:
        x_loadings = x_centered.T @ scores / score_norm
        y_loading = float(y_centered @ scores / score_norm)
    else:
        x_loadings, y_loading = np.zeros(x.shape[1]), 0.0
    residuals = y_centered - y_loading * scores
    r_squared = float(1.0 - (residuals @ residuals) / tss)

    return PlsModel(x_weights=weights.tolist(), x_loadings=x_loadings.tolist(), y_loading=y_loading,
                    x_mean=x_mean.tolist(), y_mean=y_mean, r_squared=r_squared, n=x.shape[0],
                    column_names=column_names)


def predict(model: Union[RegressionResult, PlsModel], x_new: Union[DesignMatrix, np.ndarray]) -> np.ndarray:
    """
    Linear prediction with the stored coefficients (OLS) or means and component (PLS).

    OLS predictions need a DesignMatrix whose column names equal the fitted regressors.
    """
    if isinstance(model, RegressionResult):
        if not isinstance(x_new, DesignMatrix):
            raise SchemaError("OLS prediction needs a named DesignMatrix")
        if list(x_new.names) != model.regressors():
            raise SchemaError(f"Columns {list(x_new.names)} do not match fitted columns {model.regressors()}")
        design = x_new.with_intercept() if model.intercept else x_new
        return design.values @ model.coefficient_vector()

    if isinstance(x_new, DesignMatrix):
        if model.column_names is not None and list(x_new.names) != model.column_names:
            raise SchemaError(f"Columns {list(x_new.names)} do not match fitted columns {model.column_names}")
        x_new = x_new.values
    x_new = np.atleast_2d(np.asarray(x_new, dtype=np.float64))
    if x_new.shape[1] != len(model.x_mean):
        raise SchemaError(f"Expected {len(model.x_mean)} columns, got {x_new.shape[1]}")
    scores = (x_new - np.asarray(model.x_mean)) @ np.asarray(model.x_weights)
    return model.y_mean + model.y_loading * scores
