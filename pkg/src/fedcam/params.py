"""Flat model-parameter vectors and their layer-spec bookkeeping.

A model's trainable state is exchanged (client <-> server) as one flat
float64 vector plus an ordered tuple of layer shape descriptors. The flat
layout is: for each layer in declaration order, all weights then all biases.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

_HEADER_LEN = struct.Struct("<Q")  # little-endian u64 header byte length


class AlignmentError(ValueError):
    """A flat value/gradient vector does not match its layer specs."""


@dataclass(frozen=True)
class LayerSpec:
    """Shape descriptor for one trainable layer.

    kind: "conv" (square-kernel valid 2-D convolution, stride 1) or "dense".
    For conv, in_size/out_size are channel counts; for dense, feature counts.
    """

    kind: str
    in_size: int
    out_size: int
    kernel: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown layer kind: {self.kind!r}")
        if self.in_size < 1 or self.out_size < 1 or self.kernel < 1:
            raise ValueError("layer extents must be positive")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        return (self.in_size, self.out_size)

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def param_count(self) -> int:
        return self.weight_count + self.out_size

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in": self.in_size, "out": self.out_size,
                "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], d["in"], d["out"], d.get("kernel", 1))


def total_size(layer_specs) -> int:
    return sum(s.param_count for s in layer_specs)


@dataclass
class ModelParams:
    """Ordered flat view of every weight and bias of one network."""

    layer_specs: tuple[LayerSpec, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.layer_specs = tuple(self.layer_specs)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        expect = total_size(self.layer_specs)
        if self.values.size != expect:
            raise AlignmentError(
                f"value vector has {self.values.size} entries, "
                f"layer specs require {expect}")

    @classmethod
    def zeros(cls, layer_specs) -> "ModelParams":
        return cls(tuple(layer_specs), np.zeros(total_size(layer_specs)))

    @classmethod
    def from_layers(cls, layer_specs, tensors) -> "ModelParams":
        """Flatten per-layer (weights, biases) pairs into one vector."""
        specs = tuple(layer_specs)
        if len(tensors) != len(specs):
            raise AlignmentError("one (W, b) pair per layer spec required")
        chunks = []
        for spec, (w, b) in zip(specs, tensors):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != spec.weight_shape or b.shape != (spec.out_size,):
                raise AlignmentError(f"tensor shapes do not match {spec}")
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return cls(specs, np.concatenate(chunks))

    def split(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (weights, biases) views, reshaped; inverse of from_layers."""
        out = []
        pos = 0
        for spec in self.layer_specs:
            w = self.values[pos:pos + spec.weight_count].reshape(spec.weight_shape)
            pos += spec.weight_count
            b = self.values[pos:pos + spec.out_size]
            pos += spec.out_size
            out.append((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.layer_specs, self.values.copy())

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def distance(self, other: "ModelParams") -> float:
        self._check_compatible(other)
        return float(np.linalg.norm(self.values - other.values))

    def _check_compatible(self, other: "ModelParams"):
        if self.layer_specs != other.layer_specs:
            raise AlignmentError("layer specs differ")

    # -- binary snapshot format: u64 header length, JSON header, f64-LE payload

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"layers": [s.to_dict() for s in self.layer_specs],
             "count": int(self.values.size)},
            sort_keys=True).encode("utf-8")
        payload = self.values.astype("<f8").tobytes()
        return _HEADER_LEN.pack(len(header)) + header + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelParams":
        (hlen,) = _HEADER_LEN.unpack_from(raw, 0)
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        specs = tuple(LayerSpec.from_dict(d) for d in header["layers"])
        values = np.frombuffer(raw[8 + hlen:], dtype="<f8", count=header["count"])
        return cls(specs, values.astype(np.float64))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def mean_params(uploads, weights=None) -> ModelParams:
    """Plain or weighted mean of compatible parameter vectors."""
    if not uploads:
        raise ValueError("no parameter vectors to average")
    specs = uploads[0].layer_specs
    stack = np.stack([u.values for u in uploads])
    if weights is None:
        return ModelParams(specs, stack.mean(axis=0))
    w = np.asarray(weights, dtype=np.float64)
    return ModelParams(specs, (stack * w[:, None]).sum(axis=0))
