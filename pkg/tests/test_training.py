import numpy as np
import pytest

from fitact import activations as act
from fitact.data import Dataset, DataError, make_blobs
from fitact.network import parameter_digest, relu_variant, with_bounds
from fitact.training import (
    Adam, NoFeasibleCheckpointError, PostTrainConfig, StageOrderError, TrainConfig,
    bound_gradients, cross_entropy, evaluate_accuracy, modify_architecture, post_train_bounds,
    regularized_loss, train_accuracy,
)
from fitact.workloads import init_mlp


@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(np.int64)
    x[:, 0] += np.where(y == 1, 0.5, -0.5)  # margin
    return Dataset(x, y)


@pytest.fixture(scope="module")
def trained_blobs():
    data = make_blobs(600, seed=3)
    net = train_accuracy(init_mlp((2, 16, 16, 4), seed=3), data, TrainConfig(epochs=15, learning_rate=5e-3))
    return net, data


def fd_grad(f, p, idx, h):
    old = p[idx]
    p[idx] = old + h
    fp = f()
    p[idx] = old - h
    fm = f()
    p[idx] = old
    return (fp - fm) / (2 * h)


class TestLoss:
    def test_cross_entropy_uniform(self):
        loss, g = cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))
        assert loss == pytest.approx(np.log(4))
        assert np.allclose(g.sum(axis=1), 0)

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((4, 3))
        y = np.array([0, 2, 1, 1])
        _, g = cross_entropy(z, y)
        for idx in [(0, 0), (1, 2), (3, 1)]:
            assert fd_grad(lambda: cross_entropy(z, y)[0], z, idx, 1e-6) == pytest.approx(g[idx], abs=1e-8)


class TestAdam:
    def test_first_step_closed_form(self):
        # after one step with bias correction the update is lr * sign(g) (up to eps)
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = np.array([0.3, -4.0, 1e-3])
        Adam(p, lr=0.1).step({"w": g})
        assert np.allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-5)

    def test_two_steps_closed_form(self):
        p = {"w": np.array([0.0])}
        opt = Adam(p, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step({"w": np.array([1.0])})
        opt.step({"w": np.array([3.0])})
        m = 0.9 * 0.1 * 1 + 0.1 * 3
        v = 0.999 * 0.001 * 1 + 0.001 * 9
        step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p["w"][0] == pytest.approx(-0.01 / (1 + 1e-8) - step2, rel=1e-12)


class TestStageOne:
    def test_separable_reaches_full_accuracy(self, separable):
        net = train_accuracy(init_mlp((2, 8, 2), seed=0), separable, TrainConfig(epochs=60, learning_rate=1e-2))
        assert evaluate_accuracy(net, separable) == 1.0

    def test_zero_learning_rate_is_identity(self, separable):
        net = init_mlp((2, 8, 2), seed=1)
        out = train_accuracy(net, separable, TrainConfig(epochs=2, learning_rate=0.0))
        assert out == net

    def test_input_network_untouched(self, separable):
        net = init_mlp((2, 8, 2), seed=1)
        before = parameter_digest(net)
        train_accuracy(net, separable, TrainConfig(epochs=1))
        assert parameter_digest(net) == before

    def test_full_batch_loss_decreases(self, separable):
        hist = []
        train_accuracy(init_mlp((2, 8, 2), seed=2), separable,
                       TrainConfig(epochs=25, learning_rate=1e-3, batch_size=None), history=hist)
        losses = [h["loss"] for h in hist]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(9)
        data = Dataset(rng.standard_normal((5000, 2)), rng.integers(0, 10, 5000))
        acc = evaluate_accuracy(init_mlp((2, 8, 10), seed=0), data)
        assert abs(acc - 0.1) < 0.03

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            evaluate_accuracy(init_mlp((2, 3, 2)), Dataset(np.zeros((0, 2)), np.zeros(0, np.int64)))


class TestBounds:
    def test_end_to_end_lambda_gradient(self, trained_blobs):
        net, data = trained_blobs
        fit = modify_architecture(net, data, k=5.0)
        x, y = data.x[:64], data.y[:64]
        # move off the quantization grid and into the gate's sensitive zone
        bounds = {i: b * 0.7 for i, b in fit.bound_store().bounds.items()}
        zeta = 0.1
        grads = bound_gradients(fit, x, y, zeta, bounds)
        rng = np.random.default_rng(0)
        checked = 0
        for layer in sorted(bounds):
            for j in rng.choice(bounds[layer].size, 10, replace=False):
                f = lambda: regularized_loss(fit, x, y, zeta, bounds)
                num = fd_grad(f, bounds[layer], (j,), 1e-5)
                ana = grads[layer][j]
                assert abs(ana - num) <= 1e-3 * max(abs(num), 1e-6), (layer, j, ana, num)
                checked += 1
        assert checked == 20

    def test_modify_keeps_weights_and_calibrates(self, trained_blobs):
        net, data = trained_blobs
        fit = modify_architecture(net, data)
        assert parameter_digest(fit) == parameter_digest(net)
        maxima = act.neuron_maxima(net, data.x)
        for i, lam in fit.bound_store().bounds.items():
            assert np.allclose(lam, np.maximum(maxima[i], act.BOUND_FLOOR), atol=2**-16)

    def test_post_train_requires_modified_net(self, trained_blobs):
        net, data = trained_blobs
        with pytest.raises(StageOrderError):
            post_train_bounds(net, data)

    def test_post_train_decoupled_and_within_budget(self, trained_blobs):
        net, data = trained_blobs
        train, val = data.split(0.25, seed=0)
        fit = modify_architecture(net, train)
        hist = []
        cfg = PostTrainConfig(zeta=0.5, epochs=5, learning_rate=1e-2, delta=0.01)
        out = post_train_bounds(fit, train, cfg, validation=val, history=hist)
        assert parameter_digest(out) == parameter_digest(net)
        assert evaluate_accuracy(relu_variant(net), val) - evaluate_accuracy(out, val) < 0.01
        assert out.bound_store().sum_squares() <= fit.bound_store().sum_squares()
        assert out.bound_store().flat().min() >= act.BOUND_FLOOR - 2**-16
        assert {"epoch", "loss", "clean_accuracy", "mean_bound", "reference_accuracy"} <= hist[-1].keys()

    def test_zeta_monotone(self, trained_blobs):
        net, data = trained_blobs
        train, val = data.split(0.25, seed=0)
        fit = modify_architecture(net, train)
        sums = []
        for zeta in (0.0, 0.3, 3.0):
            cfg = PostTrainConfig(zeta=zeta, epochs=3, learning_rate=1e-2, delta=0.05)
            sums.append(post_train_bounds(fit, train, cfg, validation=val).bound_store().sum_squares())
        assert sums[0] >= sums[1] >= sums[2]

    def test_no_feasible_checkpoint(self, trained_blobs):
        net, data = trained_blobs
        fit = modify_architecture(net, data)
        # bounds at the floor silence every hidden neuron, so even epoch 0 breaks the budget
        floor = {i: np.full_like(b, act.BOUND_FLOOR) for i, b in fit.bound_store().bounds.items()}
        fit = with_bounds(net, act.BoundStore(floor))
        with pytest.raises(NoFeasibleCheckpointError, match="zeta"):
            post_train_bounds(fit, data, PostTrainConfig(delta=1e-6, epochs=1))
