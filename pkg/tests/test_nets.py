"""Engine tests: layouts, forward oracles, and finite-difference gradients."""

import math

import numpy as np
import pytest

from subcomp import nets
from subcomp.nets import ModelSpec


def mlp_spec(inp=12, hidden=(16,), classes=5):
    return ModelSpec(arch="mlp", input_shape=(inp,), num_classes=classes,
                     hidden=hidden)


def conv_spec(width=4, classes=4, shape=(1, 8, 8), batchnorm=False):
    return ModelSpec(arch="convnet", input_shape=shape, num_classes=classes,
                     width=width, batchnorm=batchnorm)


class TestModelSpec:
    def test_mlp_param_count(self):
        spec = mlp_spec(inp=12, hidden=(16,), classes=5)
        assert spec.num_params == 12 * 16 + 16 + 16 * 5 + 5

    def test_convnet_param_count_closed_form(self):
        # 9 convs per the fixed channel plan plus the linear head.
        k, cin, C = 4, 1, 4
        plan = [(cin, k), (k, k), (k, 2 * k)] + [(2 * k, 2 * k)] * 6
        expect = sum(9 * a * b + b for a, b in plan) + 2 * k * C + C
        assert conv_spec(width=k, classes=C).num_params == expect

    def test_convnet_batchnorm_adds_scale_and_shift(self):
        k = 4
        without = conv_spec(width=k).num_params
        with_bn = conv_spec(width=k, batchnorm=True).num_params
        chans = [k, k, 2 * k] + [2 * k] * 6
        assert with_bn - without == 2 * sum(chans)

    def test_layout_is_contiguous_and_stable(self):
        spec = conv_spec(batchnorm=True)
        blocks = spec.layout()
        off = 0
        for b in blocks:
            assert b.offset == off
            off += b.size
        assert off == spec.num_params
        assert [b.name for b in blocks] == [b.name for b in spec.layout()]

    def test_head_coords_mlp_is_last_layer(self):
        spec = mlp_spec(inp=6, hidden=(8,), classes=3)
        coords = spec.head_coords()
        assert len(coords) == 8 * 3 + 3
        assert coords.max() == spec.num_params - 1

    def test_head_coords_convnet_includes_bn(self):
        spec = conv_spec(width=4, batchnorm=True)
        roles = {b.name: b for b in spec.layout()}
        coords = set(spec.head_coords().tolist())
        for name in ("head.w", "head.b", "bn0.g", "bn8.b"):
            b = roles[name]
            assert set(range(b.offset, b.offset + b.size)) <= coords

    def test_bad_specs_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(arch="transformer", input_shape=(4,), num_classes=2)
        with pytest.raises(ValueError):
            ModelSpec(arch="mlp", input_shape=(4,), num_classes=1)
        with pytest.raises(ValueError):
            ModelSpec(arch="convnet", input_shape=(8, 8), num_classes=2)


class TestForward:
    def test_zero_weights_give_zero_logits_and_ln_c_nll(self):
        spec = mlp_spec(classes=10)
        theta = np.zeros(spec.num_params, dtype=np.float32)
        x = np.random.default_rng(0).random((7, 12)).astype(np.float32)
        logits = nets.forward(spec, theta, x)
        assert np.all(logits == 0.0)
        nll, _ = nets.softmax_nll(logits, np.zeros(7, dtype=np.int64))
        assert nll == pytest.approx(math.log(10), abs=1e-12)

    def test_identity_linear_model(self):
        spec = ModelSpec(arch="mlp", input_shape=(2,), num_classes=2, hidden=())
        theta = np.zeros(spec.num_params, dtype=np.float32)
        theta[:4] = np.eye(2).ravel()  # fc0.w stored (nin, nout)
        logits = nets.forward(spec, theta, np.array([[1.0, 0.0]]))
        assert np.allclose(logits, [[1.0, 0.0]])

    def test_mlp_matches_straight_line_reimplementation(self):
        spec = ModelSpec(arch="mlp", input_shape=(784,), num_classes=10,
                         hidden=(32,))
        theta = nets.init_params(spec, 0)
        x = np.random.default_rng(0).random((5, 784)).astype(np.float32)
        got = nets.forward(spec, theta, x)

        # Straight-line oracle: slice the flat vector by hand, no engine code.
        w0 = theta[: 784 * 32].reshape(784, 32)
        b0 = theta[784 * 32: 784 * 32 + 32]
        o1 = 784 * 32 + 32
        w1 = theta[o1: o1 + 32 * 10].reshape(32, 10)
        b1 = theta[o1 + 32 * 10:]
        want = np.maximum(x @ w0 + b0, 0.0) @ w1 + b1
        assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_shape_and_finiteness_validation(self):
        spec = mlp_spec()
        theta = nets.init_params(spec, 0)
        with pytest.raises(ValueError):
            nets.forward(spec, theta, np.zeros((3, 13)))
        bad = theta.copy()
        bad[0] = np.nan
        with pytest.raises(ValueError):
            nets.forward(spec, bad, np.zeros((3, 12)))
        with pytest.raises(ValueError):
            nets.forward(spec, theta[:-1], np.zeros((3, 12)))

    def test_forward_deterministic(self):
        spec = conv_spec()
        theta = nets.init_params(spec, 3)
        x = np.random.default_rng(1).random((4, 1, 8, 8)).astype(np.float32)
        a = nets.forward(spec, theta, x)
        b = nets.forward(spec, theta, x)
        assert np.array_equal(a, b)

    def test_eval_batchnorm_requires_stats(self):
        spec = conv_spec(batchnorm=True)
        theta = nets.init_params(spec, 0)
        x = np.zeros((2, 1, 8, 8), dtype=np.float32)
        with pytest.raises(ValueError):
            nets.forward(spec, theta, x, mode="eval")
        # affine mode needs nothing beyond theta
        nets.forward(spec, theta, x, mode="affine")


def fd_grad(spec, theta, x, y, coords, step=1e-4, mode="train"):
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        tp = theta.copy()
        tp[c] += step
        lp, _ = nets.loss_and_grad(spec, tp, x, y, mode=mode, dtype=np.float64)
        tm = theta.copy()
        tm[c] -= step
        lm, _ = nets.loss_and_grad(spec, tm, x, y, mode=mode, dtype=np.float64)
        out[i] = (lp - lm) / (2 * step)
    return out


def check_grad(spec, seed, mode="train", n_coords=20, tol=1e-4):
    rng = np.random.default_rng(seed)
    theta = nets.init_params(spec, seed).astype(np.float64)
    # perturb away from kink-free init so relu/pool boundaries are generic
    theta += 0.01 * rng.standard_normal(len(theta))
    x = rng.random((6, *spec.input_shape))
    y = rng.integers(0, spec.num_classes, 6)
    _, grad = nets.loss_and_grad(spec, theta, x, y, mode=mode, dtype=np.float64)
    coords = rng.choice(spec.num_params, size=min(n_coords, spec.num_params),
                        replace=False)
    fd = fd_grad(spec, theta, x, y, coords, mode=mode)
    scale = np.maximum(np.abs(fd), 1e-6)
    rel = np.abs(grad[coords] - fd) / scale
    assert rel.max() < tol, f"max rel err {rel.max():.2e}"


class TestGradients:
    def test_mlp_affine_relu_gradients(self):
        check_grad(mlp_spec(inp=10, hidden=(12, 8), classes=4), seed=0)

    def test_convnet_gradients_cover_conv_pool_gap(self):
        check_grad(conv_spec(width=2, shape=(1, 6, 6)), seed=1)

    def test_convnet_batchnorm_train_mode_gradients(self):
        check_grad(conv_spec(width=2, shape=(1, 6, 6), batchnorm=True), seed=2,
                   mode="train")

    def test_convnet_batchnorm_affine_mode_gradients(self):
        check_grad(conv_spec(width=2, shape=(1, 6, 6), batchnorm=True), seed=3,
                   mode="affine")

    def test_multichannel_input_gradients(self):
        check_grad(conv_spec(width=2, shape=(3, 6, 6)), seed=4)

    def test_empty_batch_rejected(self):
        spec = mlp_spec()
        theta = nets.init_params(spec, 0)
        with pytest.raises(ValueError):
            nets.loss_and_grad(spec, theta, np.zeros((0, 12)), np.zeros(0, np.int64))

    def test_zero_weight_model_has_nonzero_bias_gradient(self):
        spec = mlp_spec(classes=10)
        theta = np.zeros(spec.num_params)
        rng = np.random.default_rng(0)
        x = rng.random((16, 12))
        y = rng.integers(0, 10, 16)
        nll, grad = nets.loss_and_grad(spec, theta, x, y)
        assert nll == pytest.approx(math.log(10), abs=1e-6)
        head_bias = spec.layout()[-1]
        assert np.any(grad[head_bias.offset:head_bias.offset + head_bias.size] != 0)

    def test_single_point_overfits_below_1e_3(self):
        spec = mlp_spec(inp=4, hidden=(8,), classes=3)
        theta = nets.init_params(spec, 0).astype(np.float64)
        x = np.array([[0.2, 0.8, 0.5, 0.1]])
        y = np.array([2])
        for _ in range(300):
            nll, g = nets.loss_and_grad(spec, theta, x, y)
            theta -= 1.0 * g
        nll, _ = nets.loss_and_grad(spec, theta, x, y)
        assert nll < 1e-3


class TestRiskAndPredict:
    def test_perfect_and_constant_classifiers(self):
        spec = mlp_spec(inp=2, hidden=(), classes=10)
        rng = np.random.default_rng(0)
        x = rng.random((50, 2)).astype(np.float32)
        y = np.repeat(np.arange(10), 5)
        theta = np.zeros(spec.num_params, dtype=np.float32)
        # constant classifier via the bias: always predicts class 3
        theta[2 * 10 + 3] = 5.0
        risk = nets.zero_one_risk(spec, theta, x, y)
        assert risk == pytest.approx(0.9)
        assert nets.zero_one_risk(spec, theta, x, np.full(50, 3)) == 0.0

    def test_argmax_ties_break_low(self):
        spec = mlp_spec(inp=2, hidden=(), classes=4)
        theta = np.zeros(spec.num_params, dtype=np.float32)
        preds = nets.predict(spec, theta, np.zeros((3, 2), dtype=np.float32))
        assert np.all(preds == 0)

    def test_risk_matches_independent_recount(self):
        spec = mlp_spec(inp=5, hidden=(7,), classes=3)
        theta = nets.init_params(spec, 0)
        rng = np.random.default_rng(0)
        x = rng.random((40, 5)).astype(np.float32)
        y = rng.integers(0, 3, 40)
        logits = nets.forward(spec, theta, x)
        recount = float(np.mean(logits.argmax(axis=1) != y))
        assert nets.zero_one_risk(spec, theta, x, y) == recount

    def test_mean_nll_matches_batched_evaluation(self):
        spec = mlp_spec(inp=5, hidden=(7,), classes=3)
        theta = nets.init_params(spec, 0)
        rng = np.random.default_rng(0)
        x = rng.random((40, 5)).astype(np.float32)
        y = rng.integers(0, 3, 40)
        whole = nets.mean_nll(spec, theta, x, y)
        chunked = nets.mean_nll(spec, theta, x, y, batch_size=7)
        assert whole == pytest.approx(chunked, rel=1e-12)


class TestInit:
    def test_init_deterministic_and_seed_sensitive(self):
        spec = conv_spec(batchnorm=True)
        a = nets.init_params(spec, 5)
        b = nets.init_params(spec, 5)
        c = nets.init_params(spec, 6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_batchnorm_init_values(self):
        spec = conv_spec(batchnorm=True)
        theta = nets.init_params(spec, 0)
        for b in spec.layout():
            block = theta[b.offset:b.offset + b.size]
            if b.role == "bn_scale":
                assert np.all(block == 1.0)
            elif b.role == "bn_shift":
                assert np.all(block == 0.0)

    def test_fan_in_bound_respected(self):
        spec = mlp_spec(inp=100, hidden=(50,), classes=10)
        theta = nets.init_params(spec, 0)
        w0 = spec.layout()[0]
        block = np.abs(theta[w0.offset:w0.offset + w0.size])
        assert block.max() <= np.sqrt(6.0 / 100)
        assert block.max() > 0.5 * np.sqrt(6.0 / 100)
