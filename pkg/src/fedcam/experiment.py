"""Config-driven experiment runner.

run_experiment executes the full round loop for one configuration and
persists everything: a JSON-lines stream of per-round records, heat-map
dumps on sampled rounds, a metrics CSV, the final global model snapshot,
and a manifest tying the artifacts together. Identical (config, seed)
pairs produce byte-identical outputs; the manifest deliberately carries
no timestamps.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attacks import AttackConfig, craft_updates
from .cam import ProbeImage, write_pgm
from .config import ExperimentConfig
from .datasets import (generate_synthetic, partition_dirichlet, partition_iid,
                       stratified_split)
from .defenses import CamAeDefense, make_defense
from .metrics import (ConfusionCounts, attack_rate, auc, detection_metrics,
                      format_cell, test_accuracy)
from .nn import ClassifierNet, softmax_cross_entropy
from .params import ModelParams
from .protocol import ClientSpec, RoundState, run_round

METRIC_COLUMNS = ("recall", "precision", "fpr", "acc", "f1", "auc",
                  "final_test_accuracy")


class RunFailure(RuntimeError):
    """A run aborted mid-flight; the partial manifest was persisted."""

    def __init__(self, manifest: "RunManifest", cause: Exception):
        super().__init__(f"run failed at round {manifest.failed_round}: {cause}")
        self.manifest = manifest
        self.cause = cause


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    build: str
    config: dict
    attacker_ids: list[int]
    paths: dict = field(default_factory=dict)
    status: str = "ok"
    failed_round: int | None = None
    rounds_completed: int = 0
    final_test_accuracy: float | None = None
    attack_rate: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash, "seed": self.seed,
            "build": self.build, "config": self.config,
            "attacker_ids": self.attacker_ids, "paths": self.paths,
            "status": self.status, "failed_round": self.failed_round,
            "rounds_completed": self.rounds_completed,
            "final_test_accuracy": self.final_test_accuracy,
            "attack_rate": self.attack_rate,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _build_world(cfg: ExperimentConfig):
    """Dataset, server test set, per-client shards, probe, attacker slots."""
    dataset = generate_synthetic(cfg.num_classes, cfg.samples_per_class,
                                 cfg.noise_sigma, seed=cfg.seed,
                                 hw=cfg.image_hw)
    train_idx, test_idx = stratified_split(dataset, cfg.test_fraction,
                                           seed=cfg.seed)
    kind, alpha = cfg.partition_kind()
    if kind == "iid":
        part = partition_iid(dataset, cfg.num_benign, seed=cfg.seed,
                             indices=train_idx)
    else:
        part = partition_dirichlet(dataset, cfg.num_benign, alpha,
                                   seed=cfg.seed, indices=train_idx)

    n_total = cfg.num_benign + cfg.num_attackers
    id_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1D5]))
    attacker_ids = sorted(
        id_rng.choice(n_total, size=cfg.num_attackers, replace=False).tolist())
    benign_ids = [i for i in range(n_total) if i not in attacker_ids]

    clients = []
    for shard, cid in zip(part.client_indices, benign_ids):
        clients.append(ClientSpec(cid, "benign", cfg.local_epochs,
                                  cfg.batch_size, cfg.client_lr, shard))

    claimed = np.zeros(n_total)
    for client in clients:
        claimed[client.id] = len(client.shard)
    mean_claim = float(np.mean([len(c.shard) for c in clients]))
    for aid in attacker_ids:
        claimed[aid] = mean_claim  # attackers claim an average-looking size

    probe_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9B]))
    probe_idx = int(probe_rng.choice(test_idx))
    probe = ProbeImage(dataset.images[probe_idx],
                       int(dataset.labels[probe_idx]))

    test_images = dataset.images[test_idx]
    test_labels = dataset.labels[test_idx]
    return dataset, clients, claimed, attacker_ids, probe, test_images, test_labels


def _surrogate_loss(cfg: ExperimentConfig, test_images, test_labels):
    """Attacker's ascent surrogate: cross-entropy on an eavesdropped batch
    of server test data."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A2]))
    take = min(64, len(test_labels))
    pick = rng.choice(len(test_labels), size=take, replace=False)
    images, labels = test_images[pick], test_labels[pick]
    specs = ClassifierNet(in_channels=1, num_classes=cfg.num_classes,
                          image_hw=cfg.image_hw).layer_specs

    def loss_and_grad(values):
        params = ModelParams(specs, values)
        net = ClassifierNet.from_params(params, image_hw=cfg.image_hw)
        loss, dlogits = softmax_cross_entropy(net.forward(images), labels)
        return loss, net.backward(dlogits).grads

    return loss_and_grad


def _dump_heatmaps(defense, out_dir, t):
    rows = getattr(defense, "last_rows", None)
    if rows is None:
        return
    round_dir = os.path.join(out_dir, "heatmaps", f"round_{t}")
    os.makedirs(round_dir, exist_ok=True)
    hw = int(round(np.sqrt(rows.shape[1])))
    for cid, row in enumerate(rows):
        write_pgm(row.reshape(hw, hw),
                  os.path.join(round_dir, f"client_{cid}.pgm"))


def pooled_detection(records, attacker_ids, n_total, warmup: int = 0):
    """Confusion counts plus score/label pools over (round, client)
    decisions, skipping rounds t <= warmup. The round's effective exclusion
    mask (voted on block boundaries) is the prediction."""
    truth = np.zeros(n_total, dtype=bool)
    truth[list(attacker_ids)] = True
    counts = ConfusionCounts()
    scores, labels = [], []
    for rec in records:
        if rec["t"] <= warmup:
            continue
        flagged = ~np.asarray(rec["include_mask"], dtype=bool)
        counts.add(flagged, truth)
        if rec.get("scores") is not None:
            scores.extend(rec["scores"])
            labels.extend(truth.tolist())
    return counts, scores, labels


def summarize(records, attacker_ids, n_total, warmup: int = 0) -> dict:
    counts, scores, labels = pooled_detection(records, attacker_ids, n_total,
                                              warmup)
    out = detection_metrics(counts)
    out["auc"] = auc(scores, labels) if scores else None
    return out


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Execute one configuration end to end; see the module docstring for
    the artifact layout under cfg.output_dir."""
    cfg.validate()
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "manifest": os.path.join(out_dir, "manifest.json"),
        "rounds": os.path.join(out_dir, "rounds.jsonl"),
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "model": os.path.join(out_dir, "model_final.bin"),
        "heatmaps": os.path.join(out_dir, "heatmaps"),
    }

    (dataset, clients, claimed, attacker_ids, probe,
     test_images, test_labels) = _build_world(cfg)
    n_total = cfg.num_benign + cfg.num_attackers

    manifest = RunManifest(
        config_hash=cfg.config_hash(), seed=cfg.seed, build=__version__,
        config=cfg.to_dict(), attacker_ids=attacker_ids, paths=paths,
        attack_rate=attack_rate(cfg.num_attackers, cfg.num_benign))

    net = ClassifierNet(in_channels=1, num_classes=cfg.num_classes,
                        image_hw=cfg.image_hw)
    global_params = net.init_params(seed=_derived_seed(cfg.seed, 0x111))

    attack_cfg = AttackConfig(
        strategy=cfg.attack.strategy, radius=cfg.attack.radius,
        radius_scale=cfg.attack.radius_scale, steps=cfg.attack.steps,
        step_size=cfg.attack.step_size, seed=cfg.seed)
    surrogate = (_surrogate_loss(cfg, test_images, test_labels)
                 if cfg.attack.strategy == "grad_ascent" else None)

    def attack_hook(benign_uploads, global_p, t):
        if cfg.num_attackers == 0:
            return []
        return craft_updates(attack_cfg, benign_uploads, global_p,
                             cfg.num_attackers, round_t=t,
                             loss_and_grad=surrogate)

    defense = make_defense(cfg, probe, n_total)
    state = RoundState(1, global_params, [], claimed)
    records = []
    try:
        with open(paths["rounds"], "w") as stream:
            for t in range(1, cfg.rounds + 1):
                decision_holder = {}

                def defense_hook(uploads, round_t):
                    decision = defense(uploads, round_t)
                    decision_holder["d"] = decision
                    return decision

                state, record = run_round(
                    state, clients, dataset, attack_hook, defense_hook,
                    seed=_derived_seed(cfg.seed, 0x52D, t),
                    optimizer=cfg.client_optimizer)
                record["defense"] = cfg.defense
                record.update(decision_holder["d"].record())
                record["test_accuracy"] = test_accuracy(
                    state.global_params, test_images, test_labels)
                records.append(record)
                stream.write(json.dumps(record, sort_keys=True) + "\n")
                if isinstance(defense, CamAeDefense) and (
                        t == 1 or t % cfg.vote_interval == 0):
                    _dump_heatmaps(defense, out_dir, t)
                manifest.rounds_completed = t
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_round = manifest.rounds_completed + 1
        manifest.save(paths["manifest"])
        raise RunFailure(manifest, exc) from exc

    manifest.final_test_accuracy = records[-1]["test_accuracy"]
    state.global_params.save(paths["model"])
    summary = summarize(records, attacker_ids, n_total)
    _write_metrics_csv(paths["metrics"], [
        {"method": cfg.defense, **summary,
         "final_test_accuracy": manifest.final_test_accuracy}])
    manifest.save(paths["manifest"])
    return manifest


def _write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method",) + METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["method"]] +
                            [format_cell(row.get(c)) for c in METRIC_COLUMNS])


def compare_defenses(cfg: ExperimentConfig, defense_list) -> list[dict]:
    """Run every defense from the same seed and data partition; emits one
    method x metrics CSV under cfg.output_dir and returns the rows.
    Per-run failures are recorded and the sweep continues."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = []
    for name in defense_list:
        sub = cfg.override(defense=name,
                           output_dir=os.path.join(cfg.output_dir, name))
        try:
            manifest = run_experiment(sub)
        except RunFailure as failure:
            rows.append({"method": name, "error": str(failure.cause)})
            continue
        with open(manifest.paths["rounds"]) as fh:
            records = [json.loads(line) for line in fh]
        summary = summarize(records, manifest.attacker_ids,
                            cfg.num_benign + cfg.num_attackers)
        rows.append({"method": name, **summary,
                     "final_test_accuracy": manifest.final_test_accuracy})
    _write_metrics_csv(os.path.join(cfg.output_dir, "metrics.csv"), rows)
    return rows


def load_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh]
