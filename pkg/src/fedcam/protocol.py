"""Communication-round orchestration: broadcast, local training, malicious
upload injection, defense filtering, and weighted aggregation.

Aggregation weights are the claimed data sizes renormalized over the
included clients so they always sum to one; excluding clients never
shrinks the global model. A round whose defense excludes everyone skips
the update and carries the global model over.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import Dataset
from .nn import ClassifierNet, adam_step, sgd_step, softmax_cross_entropy
from .params import ModelParams


class EmptyAggregationError(RuntimeError):
    """Every client was excluded; there is nothing to average."""


class RoundError(RuntimeError):
    """A hook failed; carries the communication round index."""

    def __init__(self, round_t: int, stage: str, cause: Exception):
        super().__init__(f"round {round_t}: {stage} failed: {cause}")
        self.round_t = round_t
        self.stage = stage
        self.cause = cause


@dataclass
class ClientSpec:
    id: int
    role: str                      # "benign" | "malicious"
    local_epochs: int = 2
    batch_size: int = 16
    lr: float = 0.05
    shard: np.ndarray | None = None

    def __post_init__(self):
        if self.role not in ("benign", "malicious"):
            raise ValueError(f"unknown client role: {self.role!r}")
        if self.role == "benign":
            if self.shard is None or len(self.shard) == 0:
                raise ValueError(f"benign client {self.id} has no data")
            if self.local_epochs < 0:
                raise ValueError("local_epochs must be nonnegative")


@dataclass
class RoundState:
    t: int
    global_params: ModelParams
    uploads: list = field(default_factory=list)
    claimed_sizes: np.ndarray | None = None


def local_update(client: ClientSpec, global_params: ModelParams,
                 dataset: Dataset, seed: int,
                 optimizer: str = "sgd") -> ModelParams:
    """Mini-batch training from the downloaded global model over the
    client's shard for local_epochs epochs; deterministic for a seed."""
    if client.shard is None or len(client.shard) == 0:
        raise ValueError(f"client {client.id} has an empty shard")
    params = global_params.copy()
    if client.local_epochs == 0 or client.lr == 0.0:
        return params
    net = ClassifierNet.from_params(params, image_hw=dataset.image_hw)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, 0x10CA1, client.id]))
    images = dataset.images[client.shard]
    labels = dataset.labels[client.shard]
    adam_state = None
    for _ in range(client.local_epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), client.batch_size):
            idx = order[start:start + client.batch_size]
            net.set_params(params)
            _, dlogits = softmax_cross_entropy(net.forward(images[idx]),
                                               labels[idx])
            tape = net.backward(dlogits)
            if optimizer == "adam":
                params, adam_state = adam_step(adam_state, params, tape,
                                               client.lr)
            else:
                params = sgd_step(params, tape, client.lr)
    return params


def aggregate(uploads, claimed_sizes, include_mask) -> ModelParams:
    """Weighted average of the included uploads, weights D_l renormalized
    over the included set."""
    mask = np.asarray(include_mask, dtype=bool)
    sizes = np.asarray(claimed_sizes, dtype=np.float64)
    if len(uploads) != mask.size or mask.size != sizes.size:
        raise ValueError("uploads, sizes, and mask lengths differ")
    if not mask.any():
        raise EmptyAggregationError("all clients excluded this round")
    total = sizes[mask].sum()
    weights = np.where(mask, sizes, 0.0) / total
    stack = np.stack([u.values for u in uploads])
    values = weights @ stack
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("aggregate produced non-finite values")
    return ModelParams(uploads[0].layer_specs, values)


def effective_weights(claimed_sizes, include_mask) -> np.ndarray:
    """The per-client weights aggregate() applies (zero when excluded)."""
    mask = np.asarray(include_mask, dtype=bool)
    sizes = np.asarray(claimed_sizes, dtype=np.float64)
    total = sizes[mask].sum()
    return np.where(mask, sizes, 0.0) / total if total else np.zeros_like(sizes)


def run_round(state: RoundState, benign_clients, dataset: Dataset,
              attack_hook, defense_hook, seed: int,
              optimizer: str = "sgd"):
    """Advance one communication round.

    attack_hook(benign_uploads, global_params, t) -> uploads for the
    attacker slots (may be empty); defense_hook(uploads, t) -> an object
    with include_mask plus whatever it wants logged. Returns the next
    RoundState and a record dict; hook failures raise RoundError with the
    round index attached.
    """
    t = state.t
    uploads: list[ModelParams | None] = [None] * len(state.claimed_sizes)
    benign_uploads = []
    for client in benign_clients:
        upload = local_update(client, state.global_params, dataset,
                              seed=seed, optimizer=optimizer)
        uploads[client.id] = upload
        benign_uploads.append(upload)

    attacker_ids = [i for i, u in enumerate(uploads) if u is None]
    if attacker_ids:
        try:
            crafted = attack_hook(benign_uploads, state.global_params, t)
        except Exception as exc:
            raise RoundError(t, "attack", exc) from exc
        if len(crafted) != len(attacker_ids):
            raise RoundError(t, "attack", ValueError(
                f"expected {len(attacker_ids)} malicious uploads, "
                f"got {len(crafted)}"))
        for cid, upload in zip(attacker_ids, crafted):
            uploads[cid] = upload

    try:
        verdict = defense_hook(uploads, t)
    except Exception as exc:
        raise RoundError(t, "defense", exc) from exc

    mask = np.asarray(verdict.include_mask, dtype=bool)
    skipped = False
    if getattr(verdict, "aggregate_override", None) is not None:
        new_global = verdict.aggregate_override
        weights = effective_weights(state.claimed_sizes,
                                    np.ones_like(mask, dtype=bool))
    else:
        try:
            new_global = aggregate(uploads, state.claimed_sizes, mask)
        except EmptyAggregationError:
            new_global = state.global_params
            skipped = True
        weights = effective_weights(state.claimed_sizes, mask)

    record = {
        "t": t,
        "include_mask": mask.astype(int).tolist(),
        "weight_sum": float(weights.sum()),
        "aggregation_skipped": skipped,
    }
    next_state = RoundState(t + 1, new_global, uploads, state.claimed_sizes)
    return next_state, record
