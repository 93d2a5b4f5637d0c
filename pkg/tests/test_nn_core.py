import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randprune.graph import mini_resnet, mini_vgg, mlp_probe
from randprune.nn import (AddSkip, BatchNorm2d, ChannelGate, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Network,
                          NonFiniteGradient, Parameter, ReLU, ShapeError, gradient_check, layer_forward_backward,
                          loss_cross_entropy, loss_kl, sgd_step, step_decay)


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar f() w.r.t. every entry of arr (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def max_rel(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


def make_layers(rng):
    """One instance of every layer kind with float64 parameters, plus input shapes."""
    bn = BatchNorm2d("bn", rng.normal(1, 0.2, 3), rng.normal(0, 0.2, 3),
                     rng.normal(0, 0.1, 3), rng.uniform(0.5, 1.5, 3))
    return [
        (Conv2d("conv", rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), stride=1, padding=1), [(2, 3, 5, 5)]),
        (Conv2d("conv_s2", rng.normal(size=(2, 3, 3, 3)), None, stride=2, padding=1), [(2, 3, 6, 6)]),
        (Linear("linear", rng.normal(size=(4, 6)), rng.normal(size=4)), [(3, 6)]),
        (bn, [(4, 3, 3, 3)]),
        (ReLU("relu"), [(2, 3, 4, 4)]),
        (MaxPool2d("pool", 2, 2), [(2, 3, 4, 4)]),
        (GlobalAvgPool("gap"), [(2, 3, 4, 4)]),
        (AddSkip("add"), [(2, 3, 4, 4), (2, 3, 4, 4)]),
        (ChannelGate("gate", rng.normal(size=3)), [(2, 3, 4, 4)]),
    ]


class TestLayerGradients:
    @pytest.mark.parametrize("training", [True, False])
    def test_every_kind_matches_finite_differences(self, training):
        rng = np.random.default_rng(0)
        for layer, shapes in make_layers(rng):
            xs = tuple(rng.normal(size=s) for s in shapes)
            out, _ = layer_forward_backward(layer, xs, training=training)
            r = rng.normal(size=out.shape)
            for p in layer.params().values():
                p.zero_grad()
            saved = {k: v.copy() for k, v in layer.buffers().items()}
            _, gin = layer_forward_backward(layer, xs, r, training=training)
            gin = gin if isinstance(gin, tuple) else (gin,)
            analytic_params = {k: p.grad.copy() for k, p in layer.params().items()}

            def loss():
                for k, v in saved.items():
                    layer.buffers()[k][...] = v
                return float((layer.forward(*xs, training=training) * r).sum())

            for x, g in zip(xs, gin):
                assert max_rel(g, numeric_grad(loss, x)) < 1e-4, layer.name
            for k, p in layer.params().items():
                assert max_rel(analytic_params[k], numeric_grad(loss, p.value)) < 1e-4, f"{layer.name}.{k}"

    def test_relu_definition(self):
        out, _ = layer_forward_backward(ReLU("r"), np.array([[-1.0, 2.0, 0.0]]))
        np.testing.assert_array_equal(out, [[0, 2, 0]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        out, _ = layer_forward_backward(Conv2d("c", np.ones((1, 1, 1, 1))), x)
        np.testing.assert_array_equal(out, x)

    def test_shape_mismatch_names_layer(self, rng):
        conv = Conv2d("conv7", rng.normal(size=(4, 3, 3, 3)))
        with pytest.raises(ShapeError, match="conv7"):
            conv.forward(rng.normal(size=(2, 5, 8, 8)))
        with pytest.raises(ShapeError, match="lin"):
            Linear("lin", rng.normal(size=(2, 3))).forward(rng.normal(size=(4, 5)))

    def test_ones_gate_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ChannelGate("g", np.ones(3)).forward(x), x)

    def test_batchnorm_eval_is_affine(self, rng):
        bn = BatchNorm2d("bn", rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.uniform(1, 2, 3))
        a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        f = lambda x: bn.forward(x, training=False)  # noqa: E731
        np.testing.assert_allclose(f(0.3 * a + 0.7 * b), 0.3 * f(a) + 0.7 * f(b), atol=1e-12)

    def test_batchnorm_training_updates_running_stats(self, rng):
        bn = BatchNorm2d("bn", np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), momentum=0.1)
        x = rng.normal(3.0, 2.0, size=(8, 2, 3, 3))
        bn.forward(x, training=True)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_parameter_shapes_validated(self):
        with pytest.raises(ValueError):
            Parameter(np.zeros(3), np.zeros(4), np.zeros(3))


class TestLosses:
    def test_uniform_logits(self):
        loss, _ = loss_cross_entropy(np.zeros((4, 7)), np.array([0, 1, 2, 6]))
        assert loss == pytest.approx(np.log(7))

    def test_peaked_logits(self):
        logits = np.full((2, 3), -50.0)
        logits[[0, 1], [2, 0]] = 50.0
        assert loss_cross_entropy(logits, np.array([2, 0]))[0] < 1e-30

    def test_cross_entropy_gradient(self, rng):
        logits = rng.normal(size=(5, 4))
        y = rng.integers(4, size=5)
        _, g = loss_cross_entropy(logits, y)
        n = numeric_grad(lambda: loss_cross_entropy(logits, y)[0], logits)
        assert max_rel(g, n) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_kl_example(self):
        expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        assert loss_kl([[0.5, 0.5]], [[0.9, 0.1]]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.5108, abs=1e-4)

    def test_kl_identical_is_zero(self):
        p = np.array([[0.2, 0.3, 0.5]])
        assert loss_kl(p, p) == 0.0

    def test_kl_rejects_negative(self):
        with pytest.raises(ValueError):
            loss_kl([[1.2, -0.2]], [[0.5, 0.5]])

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3),
           st.lists(st.floats(1e-3, 1.0), min_size=3, max_size=3))
    def test_kl_nonnegative(self, a, b):
        a = np.array(a) + 1e-9
        p, q = a / a.sum(), np.array(b) / np.sum(b)
        assert loss_kl(p[None], q[None]) >= -1e-15


class TestSGD:
    def test_vanilla_step(self):
        p = Parameter(np.array([1.0, -2.0]), np.array([0.5, 0.25]), np.zeros(2))
        sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_array_equal(p.value, [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25])
        np.testing.assert_array_equal(p.grad, 0)

    def test_momentum_unrolled(self):
        v, g1, g2, lr, mu, wd = 1.0, 0.5, -0.3, 0.1, 0.9, 0.01
        p = Parameter(np.array([v]), np.array([g1]), np.zeros(1))
        sgd_step([p], lr, mu, wd)
        p.grad[...] = g2
        sgd_step([p], lr, mu, wd)
        m1 = g1 + wd * v
        v1 = v - lr * m1
        m2 = mu * m1 + g2 + wd * v1
        assert p.value[0] == pytest.approx(v1 - lr * m2, abs=1e-15)

    def test_zero_lr(self):
        p = Parameter(np.array([1.0]), np.array([3.0]), np.zeros(1))
        sgd_step([p], lr=0.0)
        assert p.value[0] == 1.0 and p.grad[0] == 0.0

    def test_non_finite_aborts(self):
        a = Parameter(np.array([1.0]), np.array([1.0]), np.zeros(1))
        b = Parameter(np.array([1.0]), np.array([np.nan]), np.zeros(1))
        with pytest.raises(NonFiniteGradient):
            sgd_step([a, b], lr=0.1)
        assert a.value[0] == 1.0

    def test_step_decay(self):
        assert [step_decay(1.0, e, 8) for e in (0, 3, 4, 5, 6, 7)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


class TestNetworkGradients:
    @pytest.mark.parametrize("make", [lambda: mlp_probe(), lambda: mini_vgg(input_shape=(3, 8, 8)),
                                      lambda: mini_resnet(input_shape=(3, 8, 8), base_width=4)])
    def test_stack_gradient_check(self, make):
        g = make()
        net = Network.initialize(g, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, *g.input_shape))
        y = rng.integers(g.num_classes, size=4)
        err = gradient_check(net, (x, y), n_entries=80)
        assert err < (1e-6 if g.name == "mlp-probe" else 1e-4)

    def test_injected_fault_detected(self):
        g = mini_resnet(input_shape=(3, 8, 8), base_width=4)
        net = Network.initialize(g, seed=0, dtype=np.float64)
        fc = net.layers["fc"]
        orig = fc.backward
        fc.backward = lambda grad: orig(2 * grad)
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 3, 8, 8)), rng.integers(10, size=4)
        assert gradient_check(net, (x, y), n_entries=40) == pytest.approx(0.5, abs=1e-3)

    def test_determinism(self, resnet_graph):
        a = Network.initialize(resnet_graph, seed=3)
        b = Network.initialize(resnet_graph, seed=3)
        x = np.random.default_rng(0).normal(size=(4, 3, 16, 16)).astype(np.float32)
        y = np.array([0, 1, 2, 3])
        outs = []
        for net in (a, b):
            logits = net.forward(x, training=True)
            net.backward(loss_cross_entropy(logits, y)[1])
            outs.append((logits, [p.grad.copy() for p in net.parameters()]))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        for ga, gb in zip(outs[0][1], outs[1][1]):
            np.testing.assert_array_equal(ga, gb)

    def test_forward_input_shape_checked(self, resnet_graph):
        net = Network.initialize(resnet_graph)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 3, 8, 8), np.float32))
