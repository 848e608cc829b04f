"""
Fully-connected networks written against numpy only.

Covers the forward pass, cross-entropy backprop, the gradient of a scalarized output
with respect to the inputs, the input-gradient (Lipschitz) penalty with its double
backprop, and SGD with heavy-ball momentum. Everything is deterministic under a seed.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
import orjson
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, log_softmax, softmax

from grouped_datasets import GroupedDataset, Sampler
from lab_errors import (
    DivergenceError,
    EmptyDataError,
    InvalidParameterError,
    InvalidSpecError,
    LabelError,
    SchemaError,
    ShapeError,
    UnsupportedActivationError,
)

logger = logging.getLogger("amplification-lab.mlp")

Activation = Literal["relu", "tanh", "softplus"]
Scalarization = Literal["auto", "margin", "softmax_weighted"]

CHECKPOINT_FORMAT_VERSION = 1

# hidden widths of the fully-connected family used throughout the experiments
ARCHITECTURE_PRESETS: Dict[str, List[int]] = {
    "fc1": [256],
    "fc3": [256, 256, 256],
    "fc5": [256, 256, 256, 256, 256],
}


class MlpSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(..., description="Number of input features")
    hidden_widths: List[int] = Field(default_factory=list, description="Hidden layer widths; depth is the list length")
    output_dim: int = Field(2, description="Number of output logits (classes)")
    activation: Activation = Field("relu", description="Hidden-layer nonlinearity")
    input_batchnorm: bool = Field(True, description="Standardize inputs with statistics fixed from the train split")

    @model_validator(mode="after")
    def _check_widths(self) -> "MlpSpec":
        self.check()
        return self

    def check(self) -> None:
        if self.input_dim < 1:
            raise InvalidSpecError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.output_dim < 2:
            raise InvalidSpecError(f"output_dim must be >= 2 for classification, got {self.output_dim}")
        bad = [width for width in self.hidden_widths if width < 1]
        if bad:
            raise InvalidSpecError(f"hidden widths must be >= 1, got {list(self.hidden_widths)}")

    @classmethod
    def preset(cls, name: str, input_dim: int, output_dim: int = 2, **overrides) -> "MlpSpec":
        """
        Build one of the named fully-connected architectures.

        Args:
            name (str): One of "fc1", "fc3", "fc5".
            input_dim (int): Feature count.
            output_dim (int): Number of classes.

        Returns:
            MlpSpec: ReLU network with input standardization unless overridden.
        """
        if name not in ARCHITECTURE_PRESETS:
            raise InvalidSpecError(f"Unknown architecture preset '{name}'; choose from {sorted(ARCHITECTURE_PRESETS)}")
        fields = {"input_dim": input_dim, "hidden_widths": list(ARCHITECTURE_PRESETS[name]),
                  "output_dim": output_dim, "activation": "relu", "input_batchnorm": True}
        fields.update(overrides)
        return cls(**fields)

    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]

    def parameter_count(self) -> int:
        dims = self.layer_dims()
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(dims[:-1], dims[1:]))

    def with_width(self, width: int) -> "MlpSpec":
        return self.model_copy(update={"hidden_widths": [width] * len(self.hidden_widths)})

    def fingerprint(self) -> str:
        payload = orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)
        return hashlib.sha256(payload).hexdigest()[:16]


class GradPenalty(BaseModel):
    lam: float = Field(10.0, ge=0, validation_alias=AliasChoices("lam", "lambda"),
                       description="Penalty coefficient")
    c: float = Field(1.0, ge=0, description="Target input-gradient norm (Lipschitz constant)")
    mode: Literal["exact", "finite_difference"] = Field(
        "exact", description="Double backprop, or the finite-difference fallback (needed for relu)")
    fd_step: float = Field(1e-4, gt=0, description="Input-space step of the finite-difference fallback")


class TrainConfig(BaseModel):
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0001, ge=0)
    epochs: int = Field(500, gt=0)
    batch_size: int = Field(128, gt=0)
    seed: int = Field(0, ge=0)
    grad_penalty: Optional[GradPenalty] = None
    eval_every: int = Field(50, gt=0, description="Checkpoint cadence in optimizer steps")
    scalarization: Scalarization = Field("auto", description="Reduction of the logits for the input gradient")


class Checkpoint(BaseModel):
    step: int
    per_group_train_acc: Dict[int, float]
    per_group_test_acc: Dict[int, float]
    loss: float


class TrainingCurve(BaseModel):
    checkpoints: List[Checkpoint] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_order(self) -> "TrainingCurve":
        steps = [checkpoint.step for checkpoint in self.checkpoints]
        if any(later <= earlier for earlier, later in zip(steps, steps[1:])):
            raise ValueError(f"checkpoint steps must be strictly increasing, got {steps}")
        for checkpoint in self.checkpoints:
            for value in [*checkpoint.per_group_train_acc.values(), *checkpoint.per_group_test_acc.values()]:
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"accuracy {value} outside [0, 1] at step {checkpoint.step}")
        return self

    def steps(self) -> List[int]:
        return [checkpoint.step for checkpoint in self.checkpoints]

    def at_step(self, step: int) -> Checkpoint:
        """Checkpoint at the largest recorded step not exceeding `step`."""
        eligible = [checkpoint for checkpoint in self.checkpoints if checkpoint.step <= step]
        if not eligible:
            raise InvalidParameterError(f"No checkpoint at or before step {step}")
        return eligible[-1]

    def best_checkpoint(self, group_weights: Optional[Dict[int, float]] = None) -> Checkpoint:
        """
        Checkpoint with the highest held-out accuracy (earliest on ties).

        Args:
            group_weights: weights used to average per-group test accuracies; equal
                weights over the recorded groups when omitted.
        """
        if not self.checkpoints:
            raise EmptyDataError("Training curve has no checkpoints")

        def score(checkpoint: Checkpoint) -> float:
            accs = checkpoint.per_group_test_acc
            weights = group_weights or {group: 1.0 for group in accs}
            total = sum(weights[group] for group in accs)
            return sum(weights[group] * accs[group] for group in accs) / total

        best = self.checkpoints[0]
        for checkpoint in self.checkpoints[1:]:
            if score(checkpoint) > score(best):
                best = checkpoint
        return best

    def rows(self, run: Optional[int] = None) -> List[Dict[str, object]]:
        """Flatten to (step, group, split, accuracy, loss) rows for CSV export."""
        rows = []
        for checkpoint in self.checkpoints:
            for split, accs in (("train", checkpoint.per_group_train_acc), ("test", checkpoint.per_group_test_acc)):
                for group in sorted(accs):
                    row = {"step": checkpoint.step, "group": group, "split": split,
                           "accuracy": accs[group], "loss": checkpoint.loss}
                    if run is not None:
                        row = {"run": run, **row}
                    rows.append(row)
        return rows


@dataclass
class MlpGradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def as_list(self) -> List[np.ndarray]:
        return [array for pair in zip(self.weights, self.biases) for array in pair]

    def plus(self, other: "MlpGradients") -> "MlpGradients":
        return MlpGradients([a + b for a, b in zip(self.weights, other.weights)],
                            [a + b for a, b in zip(self.biases, other.biases)])

    @classmethod
    def zeros_like(cls, mlp: "Mlp") -> "MlpGradients":
        return cls([np.zeros_like(w) for w in mlp.weights], [np.zeros_like(b) for b in mlp.biases])


@dataclass
class Mlp:
    spec: MlpSpec
    rng_seed: int
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_shift: np.ndarray
    input_scale: np.ndarray

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in (W0, b0, W1, b1, ...) order; updates in place are visible to the model."""
        return [array for pair in zip(self.weights, self.biases) for array in pair]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "Mlp":
        return Mlp(self.spec, self.rng_seed, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.input_shift.copy(), self.input_scale.copy())

    def fit_input_standardization(self, features: np.ndarray) -> None:
        """Fix the input affine map from the training features (zero-variance columns keep scale 1)."""
        features = np.asarray(features, dtype=np.float64)
        scale = features.std(axis=0)
        self.input_shift = features.mean(axis=0)
        self.input_scale = np.where(scale > 0, scale, 1.0)

    def save(self, path: str) -> None:
        arrays = {f"weight_{index}": w for index, w in enumerate(self.weights)}
        arrays.update({f"bias_{index}": b for index, b in enumerate(self.biases)})
        np.savez(path, format_version=np.array(CHECKPOINT_FORMAT_VERSION),
                 spec=np.array(self.spec.model_dump_json()), rng_seed=np.array(self.rng_seed),
                 input_shift=self.input_shift, input_scale=self.input_scale, **arrays)
        logger.info(f"Saved model checkpoint to {path}")

    @classmethod
    def load(cls, path: str) -> "Mlp":
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise SchemaError(f"Unsupported checkpoint format version {version} in {path}")
            spec = MlpSpec.model_validate_json(str(data["spec"]))
            depth = len(spec.layer_dims()) - 1
            return cls(spec=spec, rng_seed=int(data["rng_seed"]),
                       weights=[data[f"weight_{index}"].copy() for index in range(depth)],
                       biases=[data[f"bias_{index}"].copy() for index in range(depth)],
                       input_shift=data["input_shift"].copy(), input_scale=data["input_scale"].copy())


def init_mlp(spec: MlpSpec, seed: int) -> Mlp:
    """
    Initialize every layer uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    Args:
        spec (MlpSpec): Architecture.
        seed (int): Seed of the initialization stream.

    Returns:
        Mlp: Fresh network; identical (spec, seed) give bitwise-identical parameters.
    """
    spec.check()
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims()
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(spec=spec, rng_seed=seed, weights=weights, biases=biases,
               input_shift=np.zeros(spec.input_dim), input_scale=np.ones(spec.input_dim))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _activation_slope(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return expit(z)


def _activation_curvature(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.zeros_like(z)
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    s = expit(z)
    return s * (1.0 - s)


@dataclass
class _ForwardCache:
    layer_inputs: List[np.ndarray]  # standardized x, then each hidden activation
    pre_activations: List[np.ndarray]  # one per layer; the last one is the logits

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]


def _check_batch(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.spec.input_dim:
        raise ShapeError(f"Expected a batch of shape (n, {mlp.spec.input_dim}), got {x.shape}")
    return x


def _check_labels(labels: np.ndarray, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ShapeError(f"Expected {n_rows} labels, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if n_rows and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"Labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _normalized_weights(sample_weights: Optional[np.ndarray], n_rows: int) -> np.ndarray:
    if sample_weights is None:
        return np.full(n_rows, 1.0 / n_rows)
    weights = np.asarray(sample_weights, dtype=np.float64)
    if weights.shape != (n_rows,):
        raise ShapeError(f"Expected {n_rows} sample weights, got shape {weights.shape}")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidParameterError("Sample weights must be non-negative and not all zero")
    return weights / weights.sum()


def _forward_cache(mlp: Mlp, x: np.ndarray) -> _ForwardCache:
    x = _check_batch(mlp, x)
    h = (x - mlp.input_shift) / mlp.input_scale
    layer_inputs, pre_activations = [h], []
    last = len(mlp.weights) - 1
    for index, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        pre_activations.append(z)
        if index < last:
            h = _activate(mlp.spec.activation, z)
            layer_inputs.append(h)
    return _ForwardCache(layer_inputs, pre_activations)


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Logits of shape (batch, output_dim)."""
    return _forward_cache(mlp, x).logits


def predict(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class id."""
    return np.argmax(forward(mlp, x), axis=1)


def ce_loss(logits: np.ndarray, labels: np.ndarray, sample_weights: Optional[np.ndarray] = None) -> float:
    """
    Weighted mean of per-sample negative log softmax-probability of the true class.

    Args:
        logits: (n, K) array.
        labels: n class ids in [0, K).
        sample_weights: optional non-negative weights, not all zero.

    Returns:
        float: The loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    weights = _normalized_weights(sample_weights, logits.shape[0])
    nll = -log_softmax(logits, axis=1)[np.arange(logits.shape[0]), labels]
    return float(weights @ nll)


def _backprop(mlp: Mlp, cache: _ForwardCache, output_grad: np.ndarray,
              want_parameters: bool = True) -> Tuple[Optional[MlpGradients], np.ndarray]:
    """Reverse pass from a gradient on the logits; also returns the gradient on the standardized inputs."""
    depth = len(mlp.weights)
    grad_w: List[Optional[np.ndarray]] = [None] * depth
    grad_b: List[Optional[np.ndarray]] = [None] * depth
    delta = output_grad
    upstream = delta
    for index in reversed(range(depth)):
        if want_parameters:
            grad_w[index] = delta.T @ cache.layer_inputs[index]
            grad_b[index] = delta.sum(axis=0)
        upstream = delta @ mlp.weights[index]
        if index > 0:
            delta = upstream * _activation_slope(mlp.spec.activation, cache.pre_activations[index - 1],
                                                 cache.layer_inputs[index])
    gradients = MlpGradients(grad_w, grad_b) if want_parameters else None
    return gradients, upstream


def backward(mlp: Mlp, x: np.ndarray, labels: np.ndarray,
             sample_weights: Optional[np.ndarray] = None) -> MlpGradients:
    """Gradients of ce_loss with respect to every weight and bias."""
    cache = _forward_cache(mlp, x)
    labels = _check_labels(labels, cache.logits.shape[0], mlp.spec.output_dim)
    weights = _normalized_weights(sample_weights, cache.logits.shape[0])
    delta = softmax(cache.logits, axis=1)
    delta[np.arange(delta.shape[0]), labels] -= 1.0
    delta *= weights[:, None]
    gradients, _ = _backprop(mlp, cache, delta)
    return gradients


def _output_seed(mlp: Mlp, logits: np.ndarray, scalarization: Scalarization) -> np.ndarray:
    """Gradient of the scalarized output with respect to the logits, held constant."""
    mode = scalarization
    if mode == "auto":
        mode = "margin" if mlp.spec.output_dim == 2 else "softmax_weighted"
    if mode == "margin":
        seed = np.zeros_like(logits)
        seed[:, 1] = 1.0
        seed[:, 0] = -1.0
        return seed
    return softmax(logits, axis=1)


def input_gradient(mlp: Mlp, x: np.ndarray, scalarization: Scalarization = "auto") -> np.ndarray:
    """
    Per-sample gradient of the scalarized output with respect to the raw inputs.

    Binary networks use the margin logit_1 - logit_0; wider outputs use the logits
    weighted by their (detached) softmax probabilities.
    """
    cache = _forward_cache(mlp, x)
    _, grad_inputs = _backprop(mlp, cache, _output_seed(mlp, cache.logits, scalarization), want_parameters=False)
    return grad_inputs / mlp.input_scale


def grad_penalty_value(mlp: Mlp, x: np.ndarray, lam: float, c: float,
                       scalarization: Scalarization = "auto") -> float:
    """Batch mean of lam * (||grad_x f(x)||_2 - c)^2."""
    if lam < 0:
        raise InvalidParameterError(f"Penalty coefficient must be >= 0, got {lam}")
    norms = np.linalg.norm(input_gradient(mlp, x, scalarization), axis=1)
    return float(np.mean(lam * (norms - c) ** 2))


def _penalty_adjoint(grad_inputs: np.ndarray, lam: float, c: float) -> np.ndarray:
    """d(mean penalty)/d(input gradient), zero where the input gradient vanishes."""
    norms = np.linalg.norm(grad_inputs, axis=1)
    safe = np.where(norms > 1e-12, norms, 1.0)
    coefficient = np.where(norms > 1e-12, 2.0 * lam * (norms - c) / safe, 0.0) / grad_inputs.shape[0]
    return coefficient[:, None] * grad_inputs


def grad_penalty_backward(mlp: Mlp, x: np.ndarray, lam: float, c: float, mode: str = "exact",
                          scalarization: Scalarization = "auto", fd_step: float = 1e-4) -> MlpGradients:
    """
    Parameter gradients of grad_penalty_value.

    Args:
        mode (str): "exact" runs double backprop and needs a twice-differentiable
            activation (tanh or softplus). "finite_difference" differentiates the
            parameter gradient of the output along each sample's penalty direction in
            input space; it is approximate and is the only option for relu.

    Raises:
        UnsupportedActivationError: exact mode with relu, whose second derivative is zero a.e.
    """
    if lam < 0:
        raise InvalidParameterError(f"Penalty coefficient must be >= 0, got {lam}")
    if lam == 0:
        return MlpGradients.zeros_like(mlp)
    if mode == "exact" and mlp.spec.activation == "relu":
        raise UnsupportedActivationError(
            "Exact gradient-penalty differentiation needs tanh or softplus; use mode='finite_difference' for relu")
    if mode not in ("exact", "finite_difference"):
        raise InvalidParameterError(f"Unknown penalty mode '{mode}'")

    cache = _forward_cache(mlp, x)
    seed = _output_seed(mlp, cache.logits, scalarization)
    if mode == "finite_difference":
        return _penalty_backward_finite_difference(mlp, _check_batch(mlp, x), cache, seed, lam, c, fd_step)
    return _penalty_backward_exact(mlp, cache, seed, lam, c)


def _penalty_backward_exact(mlp: Mlp, cache: _ForwardCache, seed: np.ndarray,
                            lam: float, c: float) -> MlpGradients:
    activation = mlp.spec.activation
    depth = len(mlp.weights)
    weights = mlp.weights

    # first reverse pass, keeping the per-layer gradients
    grad_pre: List[Optional[np.ndarray]] = [None] * depth  # d f / d z_l
    grad_in: List[Optional[np.ndarray]] = [None] * depth  # d f / d (input of layer l)
    grad_pre[depth - 1] = seed
    for index in reversed(range(depth)):
        grad_in[index] = grad_pre[index] @ weights[index]
        if index > 0:
            slope = _activation_slope(activation, cache.pre_activations[index - 1], cache.layer_inputs[index])
            grad_pre[index - 1] = grad_in[index] * slope

    grad_inputs = grad_in[0] / mlp.input_scale
    adj_in = _penalty_adjoint(grad_inputs, lam, c) / mlp.input_scale

    # reverse of the first reverse pass, walking the layers forward
    grad_w = [np.zeros_like(w) for w in weights]
    grad_b = [np.zeros_like(b) for b in mlp.biases]
    adj_pre: List[Optional[np.ndarray]] = [None] * depth  # adjoint on z_l through the slopes
    for index in range(depth):
        grad_w[index] += grad_pre[index].T @ adj_in
        if index == depth - 1:
            break
        adj_grad_pre = adj_in @ weights[index].T
        z = cache.pre_activations[index]
        a = cache.layer_inputs[index + 1]
        adj_pre[index] = adj_grad_pre * grad_in[index + 1] * _activation_curvature(activation, z, a)
        adj_in = adj_grad_pre * _activation_slope(activation, z, a)

    # push the pre-activation adjoints back through the forward pass
    carried = np.zeros_like(cache.pre_activations[depth - 1])
    for index in reversed(range(depth - 1)):
        z = cache.pre_activations[index]
        a = cache.layer_inputs[index + 1]
        carried = adj_pre[index] + (carried @ weights[index + 1]) * _activation_slope(activation, z, a)
        grad_w[index] += carried.T @ cache.layer_inputs[index]
        grad_b[index] += carried.sum(axis=0)
    return MlpGradients(grad_w, grad_b)


def _penalty_backward_finite_difference(mlp: Mlp, x: np.ndarray, cache: _ForwardCache, seed: np.ndarray,
                                        lam: float, c: float, step: float) -> MlpGradients:
    # grad_theta (v . grad_x f) = d/de grad_theta f(x + e v) at e = 0
    grad_inputs = _backprop(mlp, cache, seed, want_parameters=False)[1] / mlp.input_scale
    adjoint = _penalty_adjoint(grad_inputs, lam, c)
    lengths = np.linalg.norm(adjoint, axis=1)
    directions = adjoint / np.where(lengths > 0, lengths, 1.0)[:, None]
    scaled_seed = seed * lengths[:, None]
    plus, _ = _backprop(mlp, _forward_cache(mlp, x + step * directions), scaled_seed)
    minus, _ = _backprop(mlp, _forward_cache(mlp, x - step * directions), scaled_seed)
    scale = 1.0 / (2.0 * step)
    return MlpGradients([(p - m) * scale for p, m in zip(plus.weights, minus.weights)],
                        [(p - m) * scale for p, m in zip(plus.biases, minus.biases)])


def loss_and_gradients(mlp: Mlp, x: np.ndarray, labels: np.ndarray, config: TrainConfig,
                       sample_weights: Optional[np.ndarray] = None) -> Tuple[float, MlpGradients]:
    """Training objective (cross-entropy plus the optional penalty) and its gradients."""
    cache = _forward_cache(mlp, x)
    labels = _check_labels(labels, cache.logits.shape[0], mlp.spec.output_dim)
    weights = _normalized_weights(sample_weights, cache.logits.shape[0])
    nll = -log_softmax(cache.logits, axis=1)[np.arange(labels.shape[0]), labels]
    loss = float(weights @ nll)
    delta = softmax(cache.logits, axis=1)
    delta[np.arange(delta.shape[0]), labels] -= 1.0
    delta *= weights[:, None]
    gradients, _ = _backprop(mlp, cache, delta)

    penalty = config.grad_penalty
    if penalty is not None and penalty.lam > 0:
        loss += grad_penalty_value(mlp, x, penalty.lam, penalty.c, config.scalarization)
        gradients = gradients.plus(grad_penalty_backward(mlp, x, penalty.lam, penalty.c, penalty.mode,
                                                         config.scalarization, penalty.fd_step))
    return loss, gradients


def sgd_momentum_step(parameters: List[np.ndarray], gradients: List[np.ndarray], velocity: List[np.ndarray],
                      learning_rate: float, momentum: float, weight_decay: float) -> None:
    """
    One in-place heavy-ball step: g <- g + wd * theta; v <- mu * v + g; theta <- theta - lr * v.
    """
    for parameter, gradient, buffer in zip(parameters, gradients, velocity):
        gradient = gradient + weight_decay * parameter
        buffer *= momentum
        buffer += gradient
        parameter -= learning_rate * buffer


def per_group_accuracy(mlp: Mlp, dataset: GroupedDataset) -> Dict[int, float]:
    predictions = predict(mlp, dataset.features)
    correct = predictions == dataset.labels
    return {int(group): float(correct[dataset.groups == group].mean()) for group in np.unique(dataset.groups)}


def train(mlp: Mlp, train_set: GroupedDataset, test_set: GroupedDataset, sampler: Optional[Sampler] = None,
          config: Optional[TrainConfig] = None,
          on_checkpoint: Optional[Callable[[Checkpoint], None]] = None) -> Tuple[Mlp, TrainingCurve]:
    """
    Train a copy of `mlp` with minibatch SGD and return it with its training curve.

    Args:
        mlp (Mlp): Initialized network; left untouched.
        train_set (GroupedDataset): Rows to fit.
        test_set (GroupedDataset): Held-out rows evaluated at every checkpoint.
        sampler (Optional[Sampler]): Minibatch index source; uniform epochs seeded by
            config.seed when omitted.
        config (Optional[TrainConfig]): SGD recipe; the defaults reproduce the reference recipe.
        on_checkpoint: called with every checkpoint as it is recorded.

    Returns:
        Tuple[Mlp, TrainingCurve]: The trained network and per-group accuracies every
        `eval_every` steps (and at the final step).

    Raises:
        EmptyDataError: empty train or test set.
        DivergenceError: non-finite loss; carries the last finite checkpoint.
    """
    config = config or TrainConfig()
    if train_set.n_rows == 0 or test_set.n_rows == 0:
        raise EmptyDataError(f"Cannot train with {train_set.n_rows} train rows and {test_set.n_rows} test rows")
    for name, dataset in (("train", train_set), ("test", test_set)):
        if dataset.n_features != mlp.spec.input_dim:
            raise ShapeError(f"{name} set has {dataset.n_features} features, network expects {mlp.spec.input_dim}")
        if dataset.labels.max() >= mlp.spec.output_dim:
            raise LabelError(f"{name} set has label {dataset.labels.max()} but the network has "
                             f"{mlp.spec.output_dim} outputs")

    model = mlp.copy()
    if model.spec.input_batchnorm:
        model.fit_input_standardization(train_set.features)
    sampler = sampler or Sampler.uniform(seed=config.seed)

    n_rows = train_set.n_rows
    total_steps = config.epochs * math.ceil(n_rows / config.batch_size)
    parameters = model.parameters()
    velocity = [np.zeros_like(p) for p in parameters]
    checkpoints: List[Checkpoint] = []
    recent_losses: List[float] = []

    batches = sampler.index_batches(n_rows, config.batch_size, total_steps, salt=config.seed)
    for step, indices in enumerate(batches, start=1):
        loss, gradients = loss_and_gradients(model, train_set.features[indices], train_set.labels[indices], config)
        if not math.isfinite(loss):
            last = checkpoints[-1] if checkpoints else None
            logger.error(f"Training diverged at step {step} (loss={loss})")
            raise DivergenceError(f"Non-finite loss {loss} at step {step}", step=step, last_checkpoint=last,
                                  context={"step": step, "last_checkpoint_step": last.step if last else None})
        sgd_momentum_step(parameters, gradients.as_list(), velocity,
                          config.learning_rate, config.momentum, config.weight_decay)
        recent_losses.append(loss)

        if step % config.eval_every == 0 or step == total_steps:
            checkpoint = Checkpoint(step=step, per_group_train_acc=per_group_accuracy(model, train_set),
                                    per_group_test_acc=per_group_accuracy(model, test_set),
                                    loss=float(np.mean(recent_losses)))
            recent_losses = []
            checkpoints.append(checkpoint)
            logger.debug(f"step {step}: loss={checkpoint.loss:.4f} test={checkpoint.per_group_test_acc}")
            if on_checkpoint is not None:
                on_checkpoint(checkpoint)

    return model, TrainingCurve(checkpoints=checkpoints)
