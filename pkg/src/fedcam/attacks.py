"""Malicious upload crafting under a Euclidean-ball stealth constraint.

Every strategy keeps the crafted parameters within distance r of the
attacker's estimate of the next global model (the mean of the benign
uploads it eavesdrops), so distance-based server defenses see nothing
unusual. By default r is half the median pairwise distance among the
round's benign uploads, which places attackers inside the benign cluster
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams, mean_params

STRATEGIES = ("sign_flip", "noise_ball", "grad_ascent")


@dataclass
class AttackConfig:
    strategy: str = "noise_ball"
    radius: float | None = None       # fixed r; None -> radius_scale rule
    radius_scale: float = 0.5         # r = scale * median pairwise benign dist
    steps: int = 5                    # grad_ascent only
    step_size: float = 0.5            # grad_ascent only
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown attack strategy: {self.strategy!r}")
        if self.radius is not None and self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.strategy == "grad_ascent" and self.steps < 1:
            raise ValueError("grad_ascent needs at least one step")


def project_to_ball(candidate: ModelParams, center: ModelParams,
                    r: float) -> ModelParams:
    """Nearest point to candidate within the radius-r ball around center."""
    delta = candidate.values - center.values
    dist = float(np.linalg.norm(delta))
    if dist <= r:
        return candidate
    return ModelParams(center.layer_specs, center.values + (r / dist) * delta)


def median_pairwise_distance(uploads) -> float:
    stack = np.stack([u.values for u in uploads])
    dists = [np.linalg.norm(stack[a] - stack[b])
             for a in range(len(stack)) for b in range(a + 1, len(stack))]
    return float(np.median(dists)) if dists else 0.0


def resolve_radius(cfg: AttackConfig, benign_uploads) -> float:
    if cfg.radius is not None:
        return cfg.radius
    return cfg.radius_scale * median_pairwise_distance(benign_uploads)


def _unit(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:  # degenerate direction: fall back to a random one
        v = rng.normal(size=v.shape)
        n = np.linalg.norm(v)
    return v / n


def _ascend(center: ModelParams, r: float, steps: int, step_size: float,
            loss_and_grad) -> ModelParams:
    """Projected gradient ascent on the surrogate loss, starting at the
    ball center; a step is only accepted if it strictly increases the
    surrogate (with halving retries), otherwise ascent stops."""
    current = center.copy()
    loss, _ = loss_and_grad(current.values)
    for _ in range(steps):
        _, grad = loss_and_grad(current.values)
        size = step_size
        accepted = None
        for _ in range(8):
            cand = ModelParams(current.layer_specs,
                               current.values + size * grad)
            cand = project_to_ball(cand, center, r)
            cand_loss, _ = loss_and_grad(cand.values)
            if cand_loss > loss:
                accepted = (cand, cand_loss)
                break
            size *= 0.5
        if accepted is None:
            break
        current, loss = accepted
    return current


def craft_updates(cfg: AttackConfig, benign_uploads, global_params: ModelParams,
                  num_attackers: int, round_t: int = 0,
                  loss_and_grad=None) -> list[ModelParams]:
    """One constrained malicious upload per attacker.

    benign_uploads are the eavesdropped per-client parameters; if none were
    observed the attack degrades to noise_ball around the global model.
    loss_and_grad(values) -> (loss, grad) is the surrogate the grad_ascent
    strategy climbs (the harness wires in the loss on server test data).
    """
    strategy = cfg.strategy
    if not benign_uploads:
        center = global_params
        r = cfg.radius if cfg.radius is not None else 0.0
        strategy = "noise_ball"
    else:
        center = mean_params(benign_uploads)
        r = resolve_radius(cfg, benign_uploads)

    out = []
    for k in range(num_attackers):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0xA77, round_t, k]))
        if strategy == "noise_ball":
            direction = _unit(rng.normal(size=center.values.size), rng)
            crafted = ModelParams(center.layer_specs,
                                  center.values + r * direction)
        elif strategy == "sign_flip":
            # step away from the benign progress direction, with a small
            # seeded jitter so the attackers are not byte-identical
            back = _unit(center.values - global_params.values, rng)
            jitter = rng.normal(size=center.values.size)
            jnorm = np.linalg.norm(jitter)
            if jnorm > 0:
                jitter *= 0.1 * r / jnorm
            cand = ModelParams(center.layer_specs,
                               center.values - r * back + jitter)
            crafted = project_to_ball(cand, center, r)
        else:  # grad_ascent
            if loss_and_grad is None:
                raise ValueError("grad_ascent requires a surrogate loss")
            if cfg.steps <= 0:
                crafted = center.copy()
            else:
                crafted = _ascend(center, r, cfg.steps, cfg.step_size,
                                  loss_and_grad)
        out.append(crafted)
    return out
