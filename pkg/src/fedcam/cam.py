"""Class-activation heat maps for uploaded model parameters.

Each uploaded parameter vector is instantiated as a network, a fixed probe
image is pushed through it, and the gradient of the probe's class score
(pre-softmax) with respect to the last convolution's feature map weights
the activations into an H x B nonnegative map. Two weighting schemes:

- per-location: each spatial position of each channel is weighted by the
  ReLU of its own score gradient;
- pooled ("gradcam"): one weight per channel, the spatial mean of the
  gradient, so whole channels can cancel and maps may collapse to zero.

Maps are flattened and min-max normalized per map before anomaly scoring,
so the detector compares shapes rather than weight magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ClassifierNet
from .params import ModelParams


@dataclass
class ProbeImage:
    """Server-chosen test image, fixed for a whole run."""

    image: np.ndarray      # (c, h, w)
    true_class: int


@dataclass
class HeatMap:
    values: np.ndarray     # (H, B), nonnegative
    client_id: int = -1
    round_t: int = -1
    target_class: int = -1


def _feature_and_grad(params: ModelParams, probe: ProbeImage):
    """Feature map A (K, H, B) and score gradient dY_c/dA for the probe."""
    net = ClassifierNet.from_params(params, image_hw=probe.image.shape[-1])
    logits = net.forward(probe.image)
    onehot = np.zeros(logits.shape[1])
    onehot[probe.true_class] = 1.0
    tape = net.backward(onehot)
    feats = net.feature_maps[0]
    grads = tape.activation_grads[ClassifierNet.FEATURE_KEY][0]
    return feats, grads


def layercam_map(params: ModelParams, probe: ProbeImage,
                 client_id: int = -1, round_t: int = -1) -> HeatMap:
    """Per-location weighting: map = ReLU(sum_k ReLU(g_k) * A_k)."""
    feats, grads = _feature_and_grad(params, probe)
    weighted = np.maximum(grads, 0.0) * feats
    values = np.maximum(weighted.sum(axis=0), 0.0)
    return HeatMap(values, client_id, round_t, probe.true_class)


def gradcam_map(params: ModelParams, probe: ProbeImage,
                client_id: int = -1, round_t: int = -1) -> HeatMap:
    """Pooled weighting: map = ReLU(sum_k mean(g_k) * A_k)."""
    feats, grads = _feature_and_grad(params, probe)
    weights = grads.mean(axis=(1, 2))
    values = np.maximum(np.tensordot(weights, feats, axes=1), 0.0)
    return HeatMap(values, client_id, round_t, probe.true_class)


def normalize01(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; constant maps (including all-zero failures)
    normalize to all zeros so they stay representable."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def flatten_maps(maps: list[HeatMap]) -> np.ndarray:
    """Stack per-client maps into rows of min-max-normalized values.

    Row l is client l's map in row-major order; all maps must share one
    geometry.
    """
    if not maps:
        raise ValueError("no heat maps to flatten")
    shape = maps[0].values.shape
    rows = []
    for m in maps:
        if m.values.shape != shape:
            raise ValueError(f"mixed heat-map shapes: {m.values.shape} "
                             f"vs {shape}")
        rows.append(normalize01(m.values).ravel())
    return np.stack(rows)


def write_pgm(values: np.ndarray, path):
    """Dump one map as a binary 8-bit portable graymap (min-max scaled)."""
    img = np.round(normalize01(np.asarray(values, dtype=np.float64)) * 255)
    img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
