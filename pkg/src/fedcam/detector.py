"""Autoencoder anomaly scoring over flattened heat-map rows.

A fresh single-hidden-layer autoencoder is trained each round on the
round's own rows (one row per client). Rows the majority shape explains
reconstruct quickly; outliers lag behind, so their reconstruction error
stays high after the fixed training budget. A client is flagged when its
error exceeds mean + alpha * population-std of the round's errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Dense, NumericError, Sigmoid, adam_step, sum_squared_rows
from .params import ModelParams


class Autoencoder:
    """dense(d -> hidden) + sigmoid, dense(hidden -> d) + sigmoid."""

    def __init__(self, input_dim: int, hidden: int, seed: int = 0):
        self.input_dim = input_dim
        self.hidden = hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAE]))
        self.enc = Dense(input_dim, hidden)
        self.enc_act = Sigmoid()
        self.dec = Dense(hidden, input_dim)
        self.dec_act = Sigmoid()
        self.enc.init(rng, scheme="glorot")
        self.dec.init(rng, scheme="glorot")
        self.loss_history: list[float] = []

    @property
    def layer_specs(self):
        return (self.enc.spec, self.dec.spec)

    def get_params(self) -> ModelParams:
        return ModelParams.from_layers(
            self.layer_specs, [(self.enc.w, self.enc.b), (self.dec.w, self.dec.b)])

    def set_params(self, params: ModelParams):
        (ew, eb), (dw, db) = params.split()
        self.enc.w, self.enc.b = ew.copy(), eb.copy()
        self.dec.w, self.dec.b = dw.copy(), db.copy()

    def encode(self, rows: np.ndarray) -> np.ndarray:
        return self.enc_act.forward(self.enc.forward(rows))

    def reconstruct(self, rows: np.ndarray) -> np.ndarray:
        return self.dec_act.forward(self.dec.forward(self.encode(rows)))

    def _grad(self, drecon: np.ndarray) -> np.ndarray:
        dh, dec_g = self.dec.backward(self.dec_act.backward(drecon))
        _, enc_g = self.enc.backward(self.enc_act.backward(dh))
        return np.concatenate([enc_g[0].ravel(), enc_g[1].ravel(),
                               dec_g[0].ravel(), dec_g[1].ravel()])


def train_ae(rows: np.ndarray, epochs: int = 200, lr: float = 1e-3,
             weight_decay: float = 1e-5, hidden: int = 128,
             seed: int = 0) -> Autoencoder:
    """Full-batch Adam on the mean per-row squared reconstruction error."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("rows must be a nonempty 2-D matrix")
    ae = Autoencoder(rows.shape[1], hidden, seed)
    params = ae.get_params()
    state = None
    for epoch in range(epochs):
        ae.set_params(params)
        recon = ae.reconstruct(rows)
        loss, drecon = sum_squared_rows(recon, rows)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite autoencoder loss at epoch {epoch}")
        ae.loss_history.append(loss)
        grads = ae._grad(drecon)
        params, state = adam_step(state, params, grads, lr,
                                  weight_decay=weight_decay)
    ae.set_params(params)
    return ae


def score(ae: Autoencoder, rows: np.ndarray) -> np.ndarray:
    """Per-row mean absolute reconstruction error."""
    rows = np.asarray(rows, dtype=np.float64)
    recon = ae.reconstruct(rows)
    return np.abs(rows - recon).mean(axis=1)


@dataclass
class RoundVerdicts:
    """Per-client scores and benign/malicious indicators for one round."""

    errors: np.ndarray
    mean_error: float
    threshold: float
    verdicts: np.ndarray = field(default=None)  # 1 benign, 0 malicious

    def __post_init__(self):
        if self.verdicts is None:
            self.verdicts = (self.errors <= self.threshold).astype(int)


def threshold_and_verdicts(errors: np.ndarray, alpha: float = 1.0) -> RoundVerdicts:
    """delta = mean + alpha * population std; error above delta -> malicious."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no reconstruction errors to threshold")
    mean = float(errors.mean())
    delta = mean + alpha * float(errors.std())
    return RoundVerdicts(errors, mean, delta)
