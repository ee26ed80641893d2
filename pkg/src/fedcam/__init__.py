"""Federated-learning poisoning simulator with heat-map + autoencoder
defenses and classical robust-aggregation baselines."""

__version__ = "0.1.0"

from .attacks import AttackConfig, craft_updates, project_to_ball
from .baselines import (DefenseVerdict, auror_kmeans, layercam_krum,
                        multi_krum, trimmed_mean)
from .cam import (HeatMap, ProbeImage, flatten_maps, gradcam_map,
                  layercam_map, write_pgm)
from .config import AeSettings, AttackSettings, ConfigError, ExperimentConfig
from .datasets import (Dataset, Partition, generate_synthetic, load_dataset,
                       partition_dirichlet, partition_iid, save_dataset,
                       stratified_split)
from .detector import (Autoencoder, RoundVerdicts, score,
                       threshold_and_verdicts, train_ae)
from .experiment import (RunManifest, compare_defenses, load_records,
                         run_experiment, summarize)
from .metrics import (ConfusionCounts, attack_rate, auc, detection_metrics,
                      test_accuracy)
from .nn import (AdamState, ClassifierNet, GradientTape, adam_step, sgd_step,
                 softmax_cross_entropy)
from .params import LayerSpec, ModelParams
from .protocol import (ClientSpec, RoundState, aggregate, local_update,
                       run_round)
from .voting import VoteBuffer, include_mask

__all__ = [
    "AdamState", "AeSettings", "AttackConfig", "AttackSettings",
    "Autoencoder", "ClassifierNet", "ClientSpec", "ConfigError",
    "ConfusionCounts", "Dataset", "DefenseVerdict", "ExperimentConfig",
    "GradientTape", "HeatMap", "LayerSpec", "ModelParams", "Partition",
    "ProbeImage", "RoundState", "RoundVerdicts", "RunManifest",
    "VoteBuffer", "adam_step", "aggregate", "attack_rate", "auc",
    "auror_kmeans", "compare_defenses", "craft_updates", "detection_metrics",
    "flatten_maps", "generate_synthetic", "gradcam_map", "include_mask",
    "layercam_krum", "layercam_map", "load_dataset", "load_records",
    "local_update", "multi_krum", "partition_dirichlet", "partition_iid",
    "project_to_ball", "run_experiment", "run_round", "save_dataset",
    "score", "sgd_step", "softmax_cross_entropy", "stratified_split",
    "summarize", "test_accuracy", "threshold_and_verdicts", "train_ae",
    "trimmed_mean", "write_pgm"]
