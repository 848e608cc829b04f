import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mlp_network
from grouped_datasets import GroupedDataset, Sampler, gen_teaser_task, stratified_split
from lab_errors import DivergenceError, InvalidSpecError, LabelError, ShapeError, UnsupportedActivationError
from mlp_network import (
    GradPenalty,
    Mlp,
    MlpSpec,
    TrainConfig,
    backward,
    ce_loss,
    forward,
    grad_penalty_backward,
    grad_penalty_value,
    init_mlp,
    input_gradient,
    predict,
    sgd_momentum_step,
    train,
)


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def numeric_parameter_gradient(mlp, objective, eps=1e-6):
    grads = []
    for parameter in mlp.parameters():
        grad = np.zeros_like(parameter)
        for index in np.ndindex(parameter.shape):
            original = parameter[index]
            parameter[index] = original + eps
            up = objective()
            parameter[index] = original - eps
            down = objective()
            parameter[index] = original
            grad[index] = (up - down) / (2 * eps)
        grads.append(grad)
    return grads


def small_net(activation, seed, output_dim=3, input_batchnorm=False):
    spec = MlpSpec(input_dim=4, hidden_widths=[5, 3], output_dim=output_dim, activation=activation,
                   input_batchnorm=input_batchnorm)
    return init_mlp(spec, seed)


def test_init_is_deterministic_and_bounded():
    spec = MlpSpec(input_dim=6, hidden_widths=[8], output_dim=2)
    first, second = init_mlp(spec, 7), init_mlp(spec, 7)
    for a, b in zip(first.parameters(), second.parameters()):
        np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(first.weights[0]) <= 1 / np.sqrt(6))
    assert np.all(np.abs(first.weights[1]) <= 1 / np.sqrt(8))
    assert not np.array_equal(init_mlp(spec, 8).weights[0], first.weights[0])


def test_parameter_count_matches_layers():
    spec = MlpSpec(input_dim=2, hidden_widths=[64], output_dim=2)
    assert spec.parameter_count() == 2 * 64 + 64 + 64 * 2 + 2
    assert init_mlp(spec, 0).parameter_count() == spec.parameter_count()


def test_invalid_specs_are_rejected():
    with pytest.raises(InvalidSpecError):
        MlpSpec(input_dim=0, hidden_widths=[4])
    with pytest.raises(InvalidSpecError):
        MlpSpec(input_dim=3, hidden_widths=[4, 0])
    with pytest.raises(InvalidSpecError):
        MlpSpec(input_dim=3, output_dim=1)


def test_presets_and_width_rewrite():
    spec = MlpSpec.preset("fc3", input_dim=10, output_dim=4)
    assert spec.hidden_widths == [256, 256, 256]
    assert spec.activation == "relu" and spec.input_batchnorm
    assert spec.with_width(32).hidden_widths == [32, 32, 32]
    with pytest.raises(InvalidSpecError):
        MlpSpec.preset("fc9", input_dim=10)


def test_linear_network_without_hidden_layers():
    mlp = init_mlp(MlpSpec(input_dim=3, hidden_widths=[], output_dim=2, input_batchnorm=False), 0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(forward(mlp, x), x @ mlp.weights[0].T + mlp.biases[0])


def test_linear_softmax_gradient_has_closed_form():
    mlp = init_mlp(MlpSpec(input_dim=3, hidden_widths=[], output_dim=4, input_batchnorm=False), 5)
    x = np.array([[0.5, -1.0, 2.0]])
    logits = forward(mlp, x)[0]
    residual = np.exp(logits - logits.max())
    residual /= residual.sum()
    residual[2] -= 1.0
    grads = backward(mlp, x, np.array([2]))
    np.testing.assert_allclose(grads.weights[0], np.outer(residual, x[0]), atol=1e-12)
    np.testing.assert_allclose(grads.biases[0], residual, atol=1e-12)


def test_forward_rejects_wrong_width():
    mlp = small_net("relu", 0)
    with pytest.raises(ShapeError):
        forward(mlp, np.zeros((2, 5)))


def test_ce_loss_values():
    assert ce_loss(np.zeros((4, 2)), np.array([0, 1, 0, 1])) == pytest.approx(np.log(2))
    logits = np.array([[2.0, 0.0], [0.0, 2.0]])
    weighted = ce_loss(logits, np.array([0, 0]), sample_weights=np.array([1.0, 0.0]))
    assert weighted == pytest.approx(np.log1p(np.exp(-2.0)))
    with pytest.raises(LabelError):
        ce_loss(logits, np.array([0, 2]))


@pytest.mark.parametrize("activation", ["relu", "tanh", "softplus"])
@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_central_differences(activation, seed):
    rng = np.random.default_rng(100 + seed)
    mlp = small_net(activation, seed)
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, size=6)
    weights = rng.uniform(0.5, 2.0, size=6)
    analytic = backward(mlp, x, labels, weights).as_list()
    numeric = numeric_parameter_gradient(mlp, lambda: ce_loss(forward(mlp, x), labels, weights))
    assert relative_error(np.concatenate([g.ravel() for g in analytic]),
                          np.concatenate([g.ravel() for g in numeric])) < 1e-4


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_input_gradient_matches_central_differences(activation):
    rng = np.random.default_rng(3)
    mlp = small_net(activation, 3, output_dim=2, input_batchnorm=True)
    mlp.fit_input_standardization(rng.normal(2.0, 3.0, size=(50, 4)))
    x = rng.normal(size=(3, 4))
    analytic = input_gradient(mlp, x)
    eps = 1e-6
    for row in range(3):
        for col in range(4):
            step = np.zeros_like(x)
            step[row, col] = eps
            up, down = forward(mlp, x + step)[row], forward(mlp, x - step)[row]
            numeric = ((up[1] - up[0]) - (down[1] - down[0])) / (2 * eps)
            assert analytic[row, col] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
@pytest.mark.parametrize("seed", range(20))
def test_exact_penalty_gradient_matches_central_differences(activation, seed):
    rng = np.random.default_rng(200 + seed)
    mlp = small_net(activation, seed, output_dim=2)
    x = rng.normal(size=(5, 4))
    analytic = grad_penalty_backward(mlp, x, lam=10.0, c=0.5, mode="exact").as_list()
    numeric = numeric_parameter_gradient(mlp, lambda: grad_penalty_value(mlp, x, 10.0, 0.5))
    assert relative_error(np.concatenate([g.ravel() for g in analytic]),
                          np.concatenate([g.ravel() for g in numeric])) < 1e-3


def test_finite_difference_penalty_tracks_exact_gradient():
    rng = np.random.default_rng(11)
    mlp = small_net("tanh", 11, output_dim=2)
    x = rng.normal(size=(5, 4))
    exact = grad_penalty_backward(mlp, x, 10.0, 1.0, mode="exact").as_list()
    approx = grad_penalty_backward(mlp, x, 10.0, 1.0, mode="finite_difference", fd_step=1e-5).as_list()
    assert relative_error(np.concatenate([g.ravel() for g in exact]),
                          np.concatenate([g.ravel() for g in approx])) < 1e-3


def test_exact_penalty_rejects_relu():
    mlp = small_net("relu", 0, output_dim=2)
    with pytest.raises(UnsupportedActivationError):
        grad_penalty_backward(mlp, np.zeros((2, 4)), 10.0, 1.0, mode="exact")


def test_penalty_is_zero_for_lambda_zero():
    mlp = small_net("tanh", 0, output_dim=2)
    x = np.random.default_rng(0).normal(size=(4, 4))
    assert grad_penalty_value(mlp, x, 0.0, 1.0) == 0.0
    assert all(np.all(g == 0) for g in grad_penalty_backward(mlp, x, 0.0, 1.0).as_list())


def test_grad_penalty_accepts_lambda_alias():
    assert GradPenalty.model_validate({"lambda": 3.0, "c": 2.0}).lam == 3.0


def test_sgd_momentum_step_in_place():
    parameter = np.array([1.0, -2.0])
    velocity = [np.zeros(2)]
    sgd_momentum_step([parameter], [np.array([0.5, 0.5])], velocity, learning_rate=0.1, momentum=0.9,
                      weight_decay=0.0)
    np.testing.assert_allclose(parameter, [0.95, -2.05])
    sgd_momentum_step([parameter], [np.array([0.5, 0.5])], velocity, learning_rate=0.1, momentum=0.9,
                      weight_decay=0.0)
    np.testing.assert_allclose(velocity[0], [0.95, 0.95])
    np.testing.assert_allclose(parameter, [0.855, -2.145])


@pytest.mark.parametrize("weight_decay", [1e-4, 0.1, 2.5])
def test_weight_decay_is_a_gradient_term(weight_decay):
    rng = np.random.default_rng(4)
    theta = rng.normal(size=(3, 2))
    gradient = rng.normal(size=(3, 2))
    history = rng.normal(size=(3, 2))

    decayed, velocity = theta.copy(), [history.copy()]
    sgd_momentum_step([decayed], [gradient], velocity, learning_rate=0.05, momentum=0.9,
                      weight_decay=weight_decay)
    folded, folded_velocity = theta.copy(), [history.copy()]
    sgd_momentum_step([folded], [gradient + weight_decay * theta], folded_velocity, learning_rate=0.05,
                      momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(decayed, folded)
    np.testing.assert_array_equal(velocity[0], folded_velocity[0])


@given(st.integers(min_value=1, max_value=60), st.integers(min_value=1, max_value=16), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_uniform_sampler_walks_permutations(n_rows, batch_size, seed):
    per_epoch = -(-n_rows // batch_size)
    batches = list(Sampler.uniform(seed).index_batches(n_rows, batch_size, 2 * per_epoch))
    assert len(batches) == 2 * per_epoch
    first_epoch = np.concatenate(batches[:per_epoch])
    np.testing.assert_array_equal(np.sort(first_epoch), np.arange(n_rows))


def teaser_split(seed=0, n=200):
    return stratified_split(gen_teaser_task(n, 0.1, 0.0, seed=seed), 0.2, seed)


def test_train_records_checkpoints_and_is_deterministic():
    train_set, test_set = teaser_split()
    spec = MlpSpec(input_dim=2, hidden_widths=[16], output_dim=2)
    config = TrainConfig(epochs=20, batch_size=32, eval_every=10, seed=5)
    model_a, curve_a = train(init_mlp(spec, 5), train_set, test_set, config=config)
    model_b, curve_b = train(init_mlp(spec, 5), train_set, test_set, config=config)

    total_steps = 20 * int(np.ceil(train_set.n_rows / 32))
    assert curve_a.steps()[-1] == total_steps
    assert curve_a.steps()[0] == 10
    assert all(set(c.per_group_test_acc) == {0, 1} for c in curve_a.checkpoints)
    for a, b in zip(model_a.parameters(), model_b.parameters()):
        np.testing.assert_array_equal(a, b)
    assert curve_a == curve_b


class RemappedSampler:
    """Replays another sampler's batches on a row-permuted copy of its dataset."""

    def __init__(self, sampler, inverse):
        self.sampler = sampler
        self.inverse = inverse

    def index_batches(self, n_rows, batch_size, n_batches, salt=None):
        for indices in self.sampler.index_batches(n_rows, batch_size, n_batches, salt=salt):
            yield self.inverse[indices]


@pytest.mark.parametrize("input_batchnorm", [False, True])
def test_row_permutation_with_remapped_batches_gives_the_same_model(input_batchnorm):
    train_set, test_set = teaser_split(seed=2)
    perm = np.random.default_rng(17).permutation(train_set.n_rows)
    permuted = train_set.subset(perm)
    spec = MlpSpec(input_dim=2, hidden_widths=[8, 8], output_dim=2, input_batchnorm=input_batchnorm)
    config = TrainConfig(epochs=6, batch_size=16, eval_every=5, weight_decay=0.01, seed=3)

    model, curve = train(init_mlp(spec, 3), train_set, test_set, Sampler.uniform(3), config)
    remapped = RemappedSampler(Sampler.uniform(3), np.argsort(perm))
    permuted_model, permuted_curve = train(init_mlp(spec, 3), permuted, test_set, remapped, config)

    for a, b in zip(model.parameters(), permuted_model.parameters()):
        # standardization sums the rows in another order
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert curve.steps() == permuted_curve.steps()


def test_train_leaves_initial_model_untouched():
    train_set, test_set = teaser_split()
    mlp = init_mlp(MlpSpec(input_dim=2, hidden_widths=[8]), 1)
    before = [p.copy() for p in mlp.parameters()]
    train(mlp, train_set, test_set, config=TrainConfig(epochs=2, batch_size=64))
    for a, b in zip(before, mlp.parameters()):
        np.testing.assert_array_equal(a, b)


def test_train_learns_linearly_separable_groups():
    train_set, test_set = teaser_split(n=400)
    spec = MlpSpec(input_dim=2, hidden_widths=[32], output_dim=2)
    model, curve = train(init_mlp(spec, 0), train_set, test_set, config=TrainConfig(epochs=100, batch_size=32))
    best = curve.best_checkpoint()
    assert min(best.per_group_test_acc.values()) > 0.9
    assert (predict(model, test_set.features) == test_set.labels).mean() > 0.9


def test_best_checkpoint_prefers_earliest_tie():
    curve = mlp_network.TrainingCurve(checkpoints=[
        mlp_network.Checkpoint(step=10, per_group_train_acc={0: 1.0}, per_group_test_acc={0: 0.8, 1: 0.6}, loss=1.0),
        mlp_network.Checkpoint(step=20, per_group_train_acc={0: 1.0}, per_group_test_acc={0: 0.6, 1: 0.8}, loss=0.5),
        mlp_network.Checkpoint(step=30, per_group_train_acc={0: 1.0}, per_group_test_acc={0: 0.5, 1: 0.7}, loss=0.4),
    ])
    assert curve.best_checkpoint().step == 10
    assert curve.best_checkpoint({0: 1.0, 1: 3.0}).step == 20
    assert curve.at_step(25).step == 20


def test_train_reports_divergence(monkeypatch):
    train_set, test_set = teaser_split()
    mlp = init_mlp(MlpSpec(input_dim=2, hidden_widths=[4]), 0)
    monkeypatch.setattr(mlp_network, "loss_and_gradients", lambda *args, **kwargs: (float("nan"), None))
    with pytest.raises(DivergenceError) as excinfo:
        train(mlp, train_set, test_set, config=TrainConfig(epochs=1))
    assert excinfo.value.step == 1
    assert excinfo.value.last_checkpoint is None


def test_train_rejects_labels_beyond_outputs():
    dataset = GroupedDataset(np.random.default_rng(0).normal(size=(9, 2)), np.tile([0, 1, 2], 3), np.zeros(9))
    mlp = init_mlp(MlpSpec(input_dim=2, hidden_widths=[4], output_dim=2), 0)
    with pytest.raises(LabelError):
        train(mlp, dataset, dataset, config=TrainConfig(epochs=1))


def test_weighted_sampler_is_used_for_batches(monkeypatch):
    train_set, test_set = teaser_split()
    weights = np.where(train_set.groups == 1, 1.0, 0.0)
    sampler = Sampler.weighted(weights, seed=0)
    original = mlp_network.loss_and_gradients
    seen = []

    def recording(mlp, x, labels, config, sample_weights=None):
        seen.append(x.copy())
        return original(mlp, x, labels, config, sample_weights)

    monkeypatch.setattr(mlp_network, "loss_and_gradients", recording)
    train(init_mlp(MlpSpec(input_dim=2, hidden_widths=[4]), 0), train_set, test_set, sampler,
          TrainConfig(epochs=1, batch_size=16))
    # group 1 is the lower band
    assert seen and all(np.all(batch[:, 1] < 0) for batch in seen)


def test_model_save_and_load(tmp_path):
    train_set, _ = teaser_split()
    mlp = init_mlp(MlpSpec(input_dim=2, hidden_widths=[6, 4], activation="softplus"), 9)
    mlp.fit_input_standardization(train_set.features)
    path = str(tmp_path / "model.npz")
    mlp.save(path)
    loaded = Mlp.load(path)
    assert loaded.spec == mlp.spec
    np.testing.assert_array_equal(forward(loaded, train_set.features), forward(mlp, train_set.features))
