"""Round-loop adapters for every defense.

Each adapter is called once per round with the full upload list and
returns which clients to include plus whatever it wants logged. The two
heat-map pipelines (per-location and pooled weighting) share one
implementation: map every upload, flatten and normalize, retrain the
autoencoder on the round's rows, threshold the reconstruction errors, and
damp the verdicts through the voting window.
"""

from __future__ import annotations

import numpy as np

from . import baselines
from .baselines import DefenseVerdict
from .cam import ProbeImage, flatten_maps, gradcam_map, layercam_map
from .config import ExperimentConfig
from .detector import score, threshold_and_verdicts, train_ae
from .voting import VoteBuffer, include_mask


class RoundDecision:
    """What a defense hands back to the round loop."""

    def __init__(self, mask, *, verdicts=None, scores=None, threshold=None,
                 vote=None, extras=None, aggregate_override=None):
        self.include_mask = np.asarray(mask, dtype=bool)
        self.verdicts = verdicts
        self.scores = scores
        self.threshold = threshold
        self.vote = vote
        self.extras = extras or {}
        self.aggregate_override = aggregate_override

    def record(self) -> dict:
        rec = {
            "verdicts": None if self.verdicts is None
            else np.asarray(self.verdicts, dtype=int).tolist(),
            "scores": None if self.scores is None
            else [float(s) for s in self.scores],
            "threshold": None if self.threshold is None
            else float(self.threshold),
            "vote": None if self.vote is None
            else np.asarray(self.vote, dtype=int).tolist(),
        }
        rec.update(self.extras)
        return rec


class CamAeDefense:
    """Heat-map + autoencoder + voting pipeline.

    map_kind "layercam" weights each activation location by the ReLU of
    its own class-score gradient; "gradcam" pools the gradient per channel
    first (the ablation variant that can zero out whole maps).
    """

    def __init__(self, cfg: ExperimentConfig, probe: ProbeImage,
                 n_clients: int, map_kind: str = "layercam"):
        self.cfg = cfg
        self.probe = probe
        self.map_fn = layercam_map if map_kind == "layercam" else gradcam_map
        self.buffer = VoteBuffer(cfg.vote_interval, cfg.vote_threshold,
                                 n_clients)
        self.last_rows = None

    def __call__(self, uploads, t: int) -> RoundDecision:
        maps = [self.map_fn(u, self.probe, client_id=i, round_t=t)
                for i, u in enumerate(uploads)]
        rows = flatten_maps(maps)
        self.last_rows = rows
        ae = train_ae(rows, epochs=self.cfg.ae.epochs, lr=self.cfg.ae.lr,
                      weight_decay=self.cfg.ae.weight_decay,
                      hidden=self.cfg.ae.hidden,
                      seed=_round_seed(self.cfg.seed, t))
        errors = score(ae, rows)
        result = threshold_and_verdicts(errors, self.cfg.alpha_threshold)
        self.buffer.push_verdicts(result.verdicts, t)
        vote = (self.buffer.decide()
                if t % self.cfg.vote_interval == 0 else None)
        mask = include_mask(result.verdicts, vote, t, self.cfg.vote_interval)
        if not mask.any():
            # a defense must leave something to aggregate; fall back to the
            # instantaneous verdicts, then to everyone
            mask = np.asarray(result.verdicts, dtype=bool)
            if not mask.any():
                mask = np.ones(len(uploads), dtype=bool)
        return RoundDecision(
            mask, verdicts=result.verdicts, scores=errors,
            threshold=result.threshold, vote=vote,
            extras=_loss_stats(ae.loss_history))


class CamKrumDefense:
    """Heat maps scored by Krum; only the winner's upload survives."""

    def __init__(self, cfg: ExperimentConfig, probe: ProbeImage):
        self.cfg = cfg
        self.probe = probe
        self.f = cfg.krum_f if cfg.krum_f is not None else cfg.num_attackers

    def __call__(self, uploads, t: int) -> RoundDecision:
        maps = [layercam_map(u, self.probe, client_id=i, round_t=t)
                for i, u in enumerate(uploads)]
        rows = flatten_maps(maps)
        v = baselines.layercam_krum(rows, self.f)
        return RoundDecision(v.include_mask, scores=v.scores,
                             verdicts=v.include_mask.astype(int))


class MultiKrumDefense:
    def __init__(self, cfg: ExperimentConfig):
        self.f = cfg.krum_f if cfg.krum_f is not None else cfg.num_attackers

    def __call__(self, uploads, t: int) -> RoundDecision:
        v = baselines.multi_krum(uploads, f=self.f)
        return RoundDecision(v.include_mask, scores=v.scores,
                             verdicts=v.include_mask.astype(int))


class AurorDefense:
    def __init__(self, cfg: ExperimentConfig):
        self.threshold = cfg.auror_threshold

    def __call__(self, uploads, t: int) -> RoundDecision:
        v = baselines.auror_kmeans(uploads, distance_threshold=self.threshold)
        return RoundDecision(v.include_mask, scores=v.scores,
                             verdicts=v.include_mask.astype(int))


class TrimmedMeanDefense:
    """Aggregation rule, not a detector: every client stays included and
    the round's global model is the coordinate-wise trimmed mean."""

    def __init__(self, cfg: ExperimentConfig):
        self.k = cfg.trim_k if cfg.trim_k is not None else cfg.num_attackers

    def __call__(self, uploads, t: int) -> RoundDecision:
        agg = baselines.trimmed_mean(uploads, k=self.k)
        return RoundDecision(np.ones(len(uploads), dtype=bool),
                             aggregate_override=agg)


class NoDefense:
    def __call__(self, uploads, t: int) -> RoundDecision:
        return RoundDecision(np.ones(len(uploads), dtype=bool))


def make_defense(cfg: ExperimentConfig, probe: ProbeImage, n_clients: int):
    name = cfg.defense
    if name == "layercam_ae":
        return CamAeDefense(cfg, probe, n_clients, "layercam")
    if name == "gradcam_ae":
        return CamAeDefense(cfg, probe, n_clients, "gradcam")
    if name == "layercam_krum":
        return CamKrumDefense(cfg, probe)
    if name == "multi_krum":
        return MultiKrumDefense(cfg)
    if name == "auror":
        return AurorDefense(cfg)
    if name == "trimmed_mean":
        return TrimmedMeanDefense(cfg)
    if name == "none":
        return NoDefense()
    raise ValueError(f"unknown defense {name!r}")


def gradcam_ae_defense(cfg: ExperimentConfig, probe: ProbeImage,
                       n_clients: int) -> CamAeDefense:
    """The ablation pipeline: identical wiring, pooled-gradient maps."""
    return CamAeDefense(cfg, probe, n_clients, "gradcam")


def _round_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, 0xAE5, t]).generate_state(1)[0])


def _loss_stats(history) -> dict:
    """Compact summary of one AE training curve: final loss plus the worst
    relative uptick after the burn-in epoch."""
    if not history:
        return {"ae_loss_final": None, "ae_loss_max_uptick": None}
    uptick = 0.0
    for a, b in zip(history[10:], history[11:]):
        if a > 0:
            uptick = max(uptick, (b - a) / a)
    return {"ae_loss_final": float(history[-1]),
            "ae_loss_max_uptick": float(uptick)}
