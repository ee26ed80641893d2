"""Engine checks: loop-oracle convolution, finite-difference gradients,
optimizer arithmetic, and flatten/unflatten round trips."""

import numpy as np
import pytest

from fedcam.nn import (
    AdamState, ClassifierNet, Conv2D, Dense, GlobalAvgPool, ReLU, Sigmoid,
    StateError, InputShapeError, adam_step, sgd_step, softmax_cross_entropy,
)
from fedcam.params import AlignmentError, LayerSpec, ModelParams


# ---------------------------------------------------------------------------
# independent oracles


def conv2d_loops(x, w, b):
    """Straight nested-loop valid convolution, stride 1."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for a in range(k):
                            for bb in range(k):
                                acc += x[s, c, i + a, j + bb] * w[o, c, a, bb]
                    out[s, o, i, j] = acc + b[o]
    return out


def fd_param_grads(net, x, labels, step=1e-4):
    """Central finite differences of the batch loss over every parameter."""
    base = net.get_params()
    grads = np.zeros_like(base.values)
    for i in range(base.values.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            v = base.values.copy()
            v[i] += sign * step
            net.set_params(ModelParams(base.layer_specs, v))
            loss, _ = softmax_cross_entropy(net.forward(x), labels)
            if slot == 0:
                plus = loss
            else:
                minus = loss
        grads[i] = (plus - minus) / (2 * step)
    net.set_params(base)
    return grads


def adam_scalar_oracle(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam trajectory, straight loop."""
    x, m, v = x0, 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        traj.append(x)
    return np.array(traj)


# ---------------------------------------------------------------------------
# forward


def test_zero_weight_net_outputs_biases():
    net = ClassifierNet()
    params = ModelParams.zeros(net.layer_specs)
    v = params.values.copy()
    # set the head biases (last num_classes entries) to a recognizable ramp
    v[-net.num_classes:] = np.arange(net.num_classes, dtype=float)
    net.set_params(ModelParams(net.layer_specs, v))
    logits = net.forward(np.random.default_rng(0).random((1, 16, 16)))
    np.testing.assert_allclose(logits[0], np.arange(net.num_classes, dtype=float))


def test_identity_1x1_conv_passes_input_through():
    conv = Conv2D(1, 1, kernel=1)
    conv.w = np.ones((1, 1, 1, 1))
    conv.b = np.zeros(1)
    x = np.random.default_rng(1).random((2, 1, 5, 5))
    np.testing.assert_array_equal(conv.forward(x), x)


def test_forward_matches_loop_conv_oracle():
    rng = np.random.default_rng(42)
    net = ClassifierNet(in_channels=1, num_classes=10, image_hw=16)
    net.init_params(seed=42)
    x = rng.random((1, 1, 16, 16))

    a1 = np.maximum(conv2d_loops(x, net.conv1.w, net.conv1.b), 0.0)
    a2 = np.maximum(conv2d_loops(a1, net.conv2.w, net.conv2.b), 0.0)
    pooled = a2.mean(axis=(2, 3))
    want = pooled @ net.head.w + net.head.b

    got = net.forward(x)
    np.testing.assert_allclose(got, want, atol=1e-6)
    # last conv feature map is exposed with the expected geometry
    assert net.feature_maps.shape == (1, 16, 12, 12)


def test_forward_rejects_wrong_shape():
    net = ClassifierNet()
    with pytest.raises(InputShapeError):
        net.forward(np.zeros((1, 3, 16, 16)))
    with pytest.raises(InputShapeError):
        net.forward(np.zeros((1, 1, 8, 8)))


# ---------------------------------------------------------------------------
# backward


def test_linear_head_matches_closed_form():
    # single dense layer, squared loss: dW = 2(Wx - y) x^T (here x @ W layout)
    rng = np.random.default_rng(3)
    dense = Dense(4, 2)
    dense.w = rng.normal(size=(4, 2))
    dense.b = np.zeros(2)
    x = rng.normal(size=(1, 4))
    y = rng.normal(size=(1, 2))
    out = dense.forward(x)
    _, (dw, db) = dense.backward(2.0 * (out - y))
    np.testing.assert_allclose(dw, 2.0 * x.T @ (out - y), atol=1e-12)
    np.testing.assert_allclose(db, (2.0 * (out - y)).ravel(), atol=1e-12)


def test_backward_without_forward_raises():
    net = ClassifierNet()
    net.init_params(seed=0)
    with pytest.raises(StateError):
        net.backward(np.zeros(10))
    for layer in (ReLU(), Sigmoid(), GlobalAvgPool()):
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 1)))


def test_zero_upstream_gradient_gives_zero_tape():
    net = ClassifierNet()
    net.init_params(seed=5)
    net.forward(np.random.default_rng(5).random((2, 1, 16, 16)))
    tape = net.backward(np.zeros((2, 10)))
    assert not tape.grads.any()
    assert not tape.activation_grads[ClassifierNet.FEATURE_KEY].any()


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_gradients_match_finite_differences(seed):
    # small net keeps the exhaustive FD sweep fast (about 300 parameters)
    rng = np.random.default_rng(seed)
    net = ClassifierNet(in_channels=1, num_classes=3, image_hw=8,
                        conv_channels=(3, 4))
    net.init_params(seed=seed)
    x = rng.random((2, 1, 8, 8))
    labels = np.array([0, 2])

    loss, dlogits = softmax_cross_entropy(net.forward(x), labels)
    tape = net.backward(dlogits)
    fd = fd_param_grads(net, x, labels)

    denom = np.maximum(np.abs(fd), 1e-6)
    rel = np.abs(tape.grads - fd) / denom
    assert rel.max() <= 1e-3


def test_backward_linear_in_upstream_gradient():
    net = ClassifierNet()
    net.init_params(seed=7)
    net.forward(np.random.default_rng(7).random((1, 1, 16, 16)))
    d = np.random.default_rng(8).normal(size=(1, 10))
    g1 = net.backward(d).grads
    g2 = net.backward(3.0 * d).grads
    np.testing.assert_allclose(g2, 3.0 * g1, atol=1e-9)


def test_forward_backward_deterministic():
    x = np.random.default_rng(11).random((2, 1, 16, 16))
    outs = []
    for _ in range(2):
        net = ClassifierNet()
        net.init_params(seed=11)
        logits = net.forward(x)
        tape = net.backward(np.ones((2, 10)))
        outs.append((logits.copy(), tape.grads.copy()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_step_arithmetic():
    specs = (LayerSpec("dense", 1, 2),)  # 2 weights + 2 biases
    p = ModelParams(specs, np.array([1.0, 2.0, 0.0, 0.0]))
    out = sgd_step(p, np.array([1.0, 1.0, 0.0, 0.0]), lr=0.5)
    np.testing.assert_array_equal(out.values, [0.5, 1.5, 0.0, 0.0])


def test_sgd_zero_lr_is_identity():
    specs = (LayerSpec("dense", 2, 2),)
    p = ModelParams(specs, np.arange(6, dtype=float))
    out = sgd_step(p, np.ones(6), lr=0.0)
    np.testing.assert_array_equal(out.values, p.values)


def test_sgd_misaligned_grad_raises():
    specs = (LayerSpec("dense", 2, 2),)
    p = ModelParams(specs, np.zeros(6))
    with pytest.raises(AlignmentError):
        sgd_step(p, np.zeros(5), lr=0.1)


def test_sgd_converges_on_quadratic():
    # f(x) = 0.5 (x - 3)^2 coordinate-wise; minimizer x* = 3
    specs = (LayerSpec("dense", 1, 1),)
    p = ModelParams(specs, np.zeros(2))
    for _ in range(200):
        p = sgd_step(p, p.values - 3.0, lr=0.2)
    np.testing.assert_allclose(p.values, [3.0, 3.0], atol=1e-6)


def test_adam_first_step_closed_form():
    # with zero state, mhat = g, vhat = g^2: step = -lr * g / (|g| + eps)
    specs = (LayerSpec("dense", 1, 1),)
    p = ModelParams(specs, np.array([1.0, -2.0]))
    g = np.array([0.3, -0.7])
    out, state = adam_step(None, p, g, lr=0.1)
    want = p.values - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(out.values, want, atol=1e-12)
    assert state.step == 1


def test_adam_matches_scalar_oracle_on_quadratic():
    # f(x) = (x - 1)^2, grad 2(x - 1); weight_decay=0 must be vanilla Adam
    specs = (LayerSpec("dense", 1, 1),)
    p = ModelParams(specs, np.array([5.0, 5.0]))
    state = None
    traj = []
    for _ in range(50):
        g = 2.0 * (p.values - 1.0)
        p, state = adam_step(state, p, g, lr=0.05, weight_decay=0.0)
        traj.append(p.values[0])
    want = adam_scalar_oracle(5.0, lambda x: 2.0 * (x - 1.0), lr=0.05, steps=50)
    np.testing.assert_allclose(np.array(traj), want, atol=1e-8)


def test_adam_zero_grad_zero_state_is_identity():
    specs = (LayerSpec("dense", 1, 1),)
    p = ModelParams(specs, np.array([1.5, -0.5]))
    out, _ = adam_step(None, p, np.zeros(2), lr=0.1)
    np.testing.assert_array_equal(out.values, p.values)


# ---------------------------------------------------------------------------
# parameter plumbing


def test_flatten_unflatten_round_trip():
    net = ClassifierNet()
    params = net.init_params(seed=9)
    rebuilt = ModelParams.from_layers(params.layer_specs, params.split())
    assert np.array_equal(rebuilt.values, params.values)


def test_params_serialization_round_trip(tmp_path):
    net = ClassifierNet()
    params = net.init_params(seed=10)
    path = tmp_path / "model.bin"
    params.save(path)
    loaded = ModelParams.load(path)
    assert loaded.layer_specs == params.layer_specs
    assert np.array_equal(loaded.values, params.values)


def test_params_length_validation():
    with pytest.raises(AlignmentError):
        ModelParams((LayerSpec("dense", 2, 2),), np.zeros(5))
