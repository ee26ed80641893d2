"""Minimal float64 neural-network engine.

Implements exactly what the simulator needs: valid (no-padding, stride-1)
2-D convolution, ReLU, global average pooling, dense layers and sigmoid,
with hand-written backward passes, softmax cross-entropy, and SGD/Adam
steps over flat parameter vectors. Everything is double precision and
deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .params import AlignmentError, LayerSpec, ModelParams, total_size


class StateError(RuntimeError):
    """backward() called before a forward pass was recorded."""


class NumericError(RuntimeError):
    """A sanctioned operation produced non-finite values."""


class InputShapeError(ValueError):
    """Input tensor shape does not match the network's input spec."""


# ---------------------------------------------------------------------------
# layers


class Conv2D:
    """Valid 2-D convolution, square kernel, stride 1, with bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        self.spec = LayerSpec("conv", in_channels, out_channels, kernel)
        self.w = np.zeros(self.spec.weight_shape)
        self.b = np.zeros(out_channels)
        self._x = None

    def init(self, rng: np.random.Generator):
        fan_in = self.spec.in_size * self.spec.kernel ** 2
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.spec.weight_shape)
        self.b = np.zeros(self.spec.out_size)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        win = sliding_window_view(x, (self.spec.kernel,) * 2, axis=(2, 3))
        # win: (n, cin, ho, wo, k, k); contract channel + kernel dims
        out = np.tensordot(win, self.w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + self.b[None, :, None, None]

    def backward(self, dout: np.ndarray):
        if self._x is None:
            raise StateError("Conv2D.backward before forward")
        k = self.spec.kernel
        win = sliding_window_view(self._x, (k, k), axis=(2, 3))
        dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        db = dout.sum(axis=(0, 2, 3))
        # dx is a full correlation of dout with the flipped kernels
        pad = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        pwin = sliding_window_view(pad, (k, k), axis=(2, 3))
        wflip = self.w[:, :, ::-1, ::-1]
        dx = np.tensordot(pwin, wflip, axes=([1, 4, 5], [0, 2, 3]))
        return dx.transpose(0, 3, 1, 2), (dw, db)


class Dense:
    """Affine layer y = x @ W + b."""

    def __init__(self, in_features: int, out_features: int):
        self.spec = LayerSpec("dense", in_features, out_features)
        self.w = np.zeros(self.spec.weight_shape)
        self.b = np.zeros(out_features)
        self._x = None

    def init(self, rng: np.random.Generator, scheme: str = "he"):
        fan_in, fan_out = self.spec.in_size, self.spec.out_size
        if scheme == "he":
            scale = np.sqrt(2.0 / fan_in)
        else:  # glorot, for sigmoid nets
            scale = np.sqrt(2.0 / (fan_in + fan_out))
        self.w = rng.normal(0.0, scale, self.spec.weight_shape)
        self.b = np.zeros(fan_out)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, dout: np.ndarray):
        if self._x is None:
            raise StateError("Dense.backward before forward")
        dw = self._x.T @ dout
        db = dout.sum(axis=0)
        return dout @ self.w.T, (dw, db)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("ReLU.backward before forward")
        return dout * self._mask


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._y is None:
            raise StateError("Sigmoid.backward before forward")
        return dout * self._y * (1.0 - self._y)


class GlobalAvgPool:
    """(n, c, h, w) -> (n, c) spatial mean."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise StateError("GlobalAvgPool.backward before forward")
        n, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None], self._shape) / (h * w)


# ---------------------------------------------------------------------------
# the fixed classifier architecture


@dataclass
class GradientTape:
    """Backward-pass output: flat parameter gradients aligned with
    ModelParams plus activation gradients for designated layers."""

    grads: np.ndarray = field(repr=False)
    activation_grads: dict = field(default_factory=dict, repr=False)


class ClassifierNet:
    """conv3x3 (in->c1) + ReLU, conv3x3 (c1->c2) + ReLU, global average
    pool, dense (c2->num_classes). Valid convolutions, stride 1.

    The post-ReLU output of the second convolution is the network's
    feature map: a c2-channel (hw-4) x (hw-4) tensor retrievable after
    every forward pass and differentiable via the gradient tape.
    """

    FEATURE_KEY = "feature_map"

    def __init__(self, in_channels: int = 1, num_classes: int = 10,
                 image_hw: int = 16, conv_channels: tuple[int, int] = (8, 16)):
        if image_hw < 5:
            raise ValueError("image too small for two valid 3x3 convolutions")
        c1, c2 = conv_channels
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.image_hw = image_hw
        self.conv1 = Conv2D(in_channels, c1, 3)
        self.relu1 = ReLU()
        self.conv2 = Conv2D(c1, c2, 3)
        self.relu2 = ReLU()
        self.pool = GlobalAvgPool()
        self.head = Dense(c2, num_classes)
        self._trainable = (self.conv1, self.conv2, self.head)
        self._activations = None
        self._feature_maps = None

    # -- construction / parameter plumbing

    @property
    def layer_specs(self) -> tuple[LayerSpec, ...]:
        return tuple(l.spec for l in self._trainable)

    @property
    def feature_hw(self) -> int:
        return self.image_hw - 4

    @property
    def num_params(self) -> int:
        return total_size(self.layer_specs)

    @classmethod
    def from_params(cls, params: ModelParams, image_hw: int = 16) -> "ClassifierNet":
        """Instantiate the reference architecture from a parameter vector."""
        specs = params.layer_specs
        ok = (len(specs) == 3
              and specs[0].kind == specs[1].kind == "conv"
              and specs[2].kind == "dense"
              and specs[0].out_size == specs[1].in_size
              and specs[1].out_size == specs[2].in_size)
        if not ok:
            raise AlignmentError(
                "parameter vector does not describe the conv-conv-dense "
                "reference architecture")
        net = cls(in_channels=specs[0].in_size, num_classes=specs[2].out_size,
                  image_hw=image_hw,
                  conv_channels=(specs[0].out_size, specs[1].out_size))
        net.set_params(params)
        return net

    def init_params(self, seed: int) -> ModelParams:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.conv1.init(rng)
        self.conv2.init(rng)
        self.head.init(rng)
        return self.get_params()

    def get_params(self) -> ModelParams:
        return ModelParams.from_layers(
            self.layer_specs, [(l.w, l.b) for l in self._trainable])

    def set_params(self, params: ModelParams):
        if params.layer_specs != self.layer_specs:
            raise AlignmentError("parameter vector does not match this network")
        for layer, (w, b) in zip(self._trainable, params.split()):
            layer.w = w.copy()
            layer.b = b.copy()

    # -- forward / backward

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run a batch (n, c, h, w) or single image (c, h, w); returns logits.

        Per-layer activations are kept on the instance for inspection and
        for the backward pass.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.in_channels or \
                x.shape[2] != self.image_hw or x.shape[3] != self.image_hw:
            raise InputShapeError(
                f"expected (n, {self.in_channels}, {self.image_hw}, "
                f"{self.image_hw}) input, got {x.shape}")
        a1 = self.relu1.forward(self.conv1.forward(x))
        a2 = self.relu2.forward(self.conv2.forward(a1))
        pooled = self.pool.forward(a2)
        logits = self.head.forward(pooled)
        self._feature_maps = a2
        self._activations = [a1, a2, pooled, logits]
        return logits

    @property
    def activations(self) -> list[np.ndarray]:
        if self._activations is None:
            raise StateError("no forward pass recorded")
        return self._activations

    @property
    def feature_maps(self) -> np.ndarray:
        """Post-ReLU output of the last convolution, (n, K, H, B)."""
        if self._feature_maps is None:
            raise StateError("no forward pass recorded")
        return self._feature_maps

    def backward(self, dlogits: np.ndarray) -> GradientTape:
        """Backpropagate an upstream gradient on the logits.

        Returns flat parameter gradients (aligned with get_params()) and
        the gradient with respect to the feature map.
        """
        if self._activations is None:
            raise StateError("backward without a recorded forward pass")
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.ndim == 1:
            dlogits = dlogits[None]
        dpooled, head_g = self.head.backward(dlogits)
        da2 = self.pool.backward(dpooled)
        feature_grad = da2
        da1, conv2_g = self.conv2.backward(self.relu2.backward(da2))
        _, conv1_g = self.conv1.backward(self.relu1.backward(da1))
        flat = np.concatenate([
            conv1_g[0].ravel(), conv1_g[1].ravel(),
            conv2_g[0].ravel(), conv2_g[1].ravel(),
            head_g[0].ravel(), head_g[1].ravel()])
        return GradientTape(flat, {self.FEATURE_KEY: feature_grad})

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = 1e-300  # log argument guard; probs of the true class are positive
    loss = -np.mean(np.log(probs[np.arange(n), labels] + eps))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def sum_squared_rows(pred: np.ndarray, target: np.ndarray):
    """Mean over rows of the squared L2 row difference; returns (loss, dpred)."""
    diff = pred - target
    n = pred.shape[0]
    loss = float((diff ** 2).sum() / n)
    return loss, 2.0 * diff / n


# ---------------------------------------------------------------------------
# optimizers


def _grad_vector(tape, n: int) -> np.ndarray:
    g = tape.grads if isinstance(tape, GradientTape) else np.asarray(tape)
    g = g.ravel()
    if g.size != n:
        raise AlignmentError(f"gradient length {g.size} != parameter length {n}")
    return g


def sgd_step(params: ModelParams, tape, lr: float) -> ModelParams:
    """One plain gradient-descent step: params - lr * grad."""
    g = _grad_vector(tape, params.values.size)
    return ModelParams(params.layer_specs, params.values - lr * g)


@dataclass
class AdamState:
    m: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState | None, params: ModelParams, tape,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam step with decoupled weight decay; returns (params, state).

    Pass state=None on the first call. weight_decay=0 is vanilla Adam.
    """
    n = params.values.size
    if state is None:
        state = AdamState.zeros(n)
    g = _grad_vector(tape, n)
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
        raise NumericError("non-finite Adam moments")
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    new = params.values - lr * mhat / (np.sqrt(vhat) + eps)
    if weight_decay:
        new = new - lr * weight_decay * params.values
    return ModelParams(params.layer_specs, new), AdamState(m, v, t)
