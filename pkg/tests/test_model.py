import numpy as np
import pytest

from edgeagree.grid import InvalidInputError
from edgeagree.loss import LossConfig, combined_mask_loss, mask_bce_loss
from edgeagree.model import (OptimizerState, backward, forward, init_weights, load_checkpoint,
                             param_shapes, save_checkpoint, sgd_step, zeros_head)

from oracles import central_diff, rel_error, square_mask

# every loss formulation the head is trained with, on a 14x14 mask / 28x28 image
GRADCHECK_CONFIGS = [
    LossConfig(filter_set=None, alpha=0.0),
    LossConfig("Sobel", p=2, alpha=1.0),
    LossConfig("Laplace", p=4, alpha=1 / 16, smooth_gt=True),
    LossConfig("SobelAndLaplace", p=3, alpha=0.5, smooth_pred=True, smooth_gt=True),
    LossConfig("Prewitt", p=2, alpha=1.0, include_magnitude=True),
    LossConfig("Roberts", p=2, alpha=2.0, formulation="productpw"),
    LossConfig("Sobel", p=2, alpha=1.0, formulation="expproductpw"),
    LossConfig("Kayyali", p=1, alpha=0.1),
]


def small_problem(seed, mask=14):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(2 * mask, 2 * mask))
    gt = square_mask(mask, mask // 2)
    return image, gt


def head_loss(head, image, class_id, gt, cfg):
    pred, cache = forward(head, image, class_id)
    return combined_mask_loss(pred, gt, cfg), cache


@pytest.mark.parametrize("cfg", GRADCHECK_CONFIGS, ids=lambda c: f"{c.filter_set}-{c.formulation.value}")
def test_full_network_gradient(cfg):
    image, gt = small_problem(0)
    head = init_weights(3, mask_size=14)
    # nonzero biases so every parameter path is exercised away from ReLU kinks
    rng = np.random.default_rng(1)
    for k in ("b1", "b2", "b3"):
        head.params[k] = rng.normal(scale=0.1, size=head.params[k].shape)
    class_id = 1
    res, cache = head_loss(head, image, class_id, gt, cfg)
    # finite differences are only valid away from ReLU kinks; one step moves
    # any pre-activation by at most ~1e-5 here
    assert min(np.abs(cache.z1).min(), np.abs(cache.z2).min()) > 3e-5
    grads = backward(head, cache, res.grad_wrt_pred)
    for name, value in head.params.items():
        def f(z, name=name):
            saved = head.params[name]
            head.params[name] = z
            out = head_loss(head, image, class_id, gt, cfg)[0].value
            head.params[name] = saved
            return out

        fd = central_diff(f, value, h=1e-5)
        assert rel_error(grads[name], fd) < 1e-4, name


def test_zero_weights_give_half():
    head = zeros_head(28)
    pred, _ = forward(head, np.random.default_rng(0).uniform(size=(56, 56)), 2)
    assert np.all(pred == 0.5)


@pytest.mark.parametrize("mask_size", [28, 56])
def test_output_shape(mask_size):
    head = init_weights(0, mask_size)
    pred, _ = forward(head, np.zeros((2 * mask_size, 2 * mask_size)), 0)
    assert pred.shape == (mask_size, mask_size)
    assert np.all((pred > 0) & (pred < 1))


def test_forward_is_pure():
    head = init_weights(5)
    image = np.random.default_rng(2).uniform(size=(56, 56))
    a, _ = forward(head, image, 1)
    b, _ = forward(head, image, 1)
    assert np.array_equal(a, b)


def test_forward_rejects_bad_class():
    with pytest.raises(InvalidInputError):
        forward(init_weights(0), np.zeros((56, 56)), 3)
    with pytest.raises(InvalidInputError):
        forward(init_weights(0), np.zeros((50, 50)), 0)


def test_zero_upstream_gives_zero_grads():
    head = init_weights(0)
    _, cache = forward(head, np.random.default_rng(0).uniform(size=(56, 56)), 0)
    grads = backward(head, cache, np.zeros((28, 28)))
    assert all(np.all(g == 0) for g in grads.values())


def test_unselected_classes_get_no_gradient():
    head = init_weights(0)
    image = np.random.default_rng(0).uniform(size=(56, 56))
    pred, cache = forward(head, image, 1)
    grads = backward(head, cache, mask_bce_loss(pred, square_mask()).grad_wrt_pred)
    assert np.all(grads["w3"][[0, 2]] == 0) and np.all(grads["b3"][[0, 2]] == 0)
    assert np.any(grads["w3"][1] != 0)


def test_backward_rejects_mismatched_grad():
    head = init_weights(0)
    _, cache = forward(head, np.zeros((56, 56)), 0)
    with pytest.raises(InvalidInputError):
        backward(head, cache, np.zeros((27, 27)))


class TestInit:
    def test_deterministic(self):
        a, b = init_weights(9), init_weights(9)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert not np.array_equal(a.params["w1"], init_weights(10).params["w1"])

    def test_biases_zero(self):
        head = init_weights(4)
        for k in ("b1", "b2", "b3"):
            assert np.all(head.params[k] == 0)

    def test_xavier_variance(self):
        # Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) has variance 2 / (fan_in + fan_out)
        fan_in, fan_out = 1 * 9, 8 * 9
        expected = 2.0 / (fan_in + fan_out)
        w = np.concatenate([init_weights(s).params["w1"].ravel() for s in range(10)])
        assert abs(w.var() / expected - 1) < 0.2
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w) <= limit)

    def test_shapes(self):
        head = init_weights(0)
        assert {k: v.shape for k, v in head.params.items()} == param_shapes()
        assert head.param_count == 72 + 8 + 576 + 8 + 24 + 3


class TestSgd:
    def params(self):
        return {"w": np.array([1.0, -2.0, 3.0])}

    def test_zero_grad_no_decay_is_identity(self):
        p = self.params()
        new, _ = sgd_step(p, {"w": np.zeros(3)}, OptimizerState(0.1, weight_decay=0.0))
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_closed_form(self):
        p = self.params()
        g = {"w": np.array([0.5, 0.5, -1.0])}
        new, state = sgd_step(p, g, OptimizerState(0.01))
        np.testing.assert_allclose(new["w"], p["w"] - 0.01 * (g["w"] + 1e-4 * p["w"]), rtol=1e-15)
        assert state.momentum == 0.9 and state.weight_decay == 1e-4

    def test_two_steps_constant_grad(self):
        # scalar simulation of v <- 0.9 v + g;  x <- x - lr v
        lr, g = 0.05, 0.7
        x = v = 0.0
        for _ in range(2):
            v = 0.9 * v + g
            x -= lr * v
        assert x == pytest.approx(-lr * g * 2.9, rel=1e-14)
        p = {"w": np.zeros(1)}
        state = OptimizerState(lr, weight_decay=0.0)
        for _ in range(2):
            p, state = sgd_step(p, {"w": np.full(1, g)}, state)
        assert p["w"][0] == pytest.approx(-lr * g * 2.9, rel=1e-14)

    def test_velocity_starts_at_zero(self):
        _, state = sgd_step(self.params(), {"w": np.zeros(3)}, OptimizerState(0.1, weight_decay=0.0))
        assert np.all(state.velocity["w"] == 0)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            sgd_step(self.params(), {"w": np.zeros(2)}, OptimizerState(0.1))
        with pytest.raises(InvalidInputError):
            sgd_step(self.params(), {"v": np.zeros(3)}, OptimizerState(0.1))
        with pytest.raises(InvalidInputError):
            OptimizerState(0.0)


def test_one_step_decreases_sample_loss():
    from edgeagree.synthdata import DatasetSpec, generate_sample
    sample = generate_sample(DatasetSpec(n_train=4, n_eval=1), 0)
    cfg = LossConfig("Sobel")
    head = init_weights(0)
    pred, cache = forward(head, sample.image, sample.class_id)
    before = combined_mask_loss(pred, sample.gt_mask, cfg)
    grads = backward(head, cache, before.grad_wrt_pred)
    decreased = []
    for lr in (1e-2, 1e-3, 1e-4):
        new, _ = sgd_step(head.params, grads, OptimizerState(lr))
        probe = head.copy()
        probe.params = new
        after = combined_mask_loss(forward(probe, sample.image, sample.class_id)[0], sample.gt_mask, cfg)
        decreased.append(after.value < before.value)
    assert any(decreased)


def test_checkpoint_roundtrip(tmp_path):
    head = init_weights(11)
    path = tmp_path / "head.ckpt"
    save_checkpoint(path, head, seed=11, step=42)
    loaded, seed, step = load_checkpoint(path)
    assert (seed, step) == (11, 42)
    assert loaded.mask_size == head.mask_size and loaded.n_classes == head.n_classes
    for k in head.params:
        assert np.array_equal(loaded.params[k], head.params[k])
    assert path.read_text().startswith("# edgeagree mask head checkpoint v1\nseed 11\nstep 42\n")
