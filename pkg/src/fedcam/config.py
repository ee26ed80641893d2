"""Declarative experiment configuration.

One YAML file (key-nested) describes a whole run; CLI flags override file
values, file values override built-in desk-scale defaults. The config
hash is the SHA-256 of the canonical JSON rendering, so identical configs
hash identically on any platform.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .attacks import STRATEGIES

DEFENSES = ("layercam_ae", "gradcam_ae", "layercam_krum", "multi_krum",
            "trimmed_mean", "auror", "none")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    """Validation failure listing every offending field."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


@dataclass
class AttackSettings:
    strategy: str = "noise_ball"
    radius: float | None = None      # fixed r; None applies the scale rule
    radius_scale: float = 0.5
    steps: int = 5
    step_size: float = 0.5


@dataclass
class AeSettings:
    hidden: int = 128
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5


@dataclass
class ExperimentConfig:
    num_benign: int = 21
    num_attackers: int = 3
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 16
    client_lr: float = 0.05
    client_optimizer: str = "sgd"
    partition: str = "iid"           # "iid" or "dirichlet:<alpha>"
    attack: AttackSettings = field(default_factory=AttackSettings)
    defense: str = "layercam_ae"
    ae: AeSettings = field(default_factory=AeSettings)
    alpha_threshold: float = 1.0
    vote_interval: int = 3           # xi
    vote_threshold: int = 2          # epsilon
    seed: int = 0
    output_dir: str = "runs/exp"
    # desk-scale data knobs
    num_classes: int = 10
    samples_per_class: int = 265
    noise_sigma: float = 0.05
    image_hw: int = 16
    test_fraction: float = 0.2
    # baseline knobs (None -> derived defaults)
    krum_f: int | None = None        # default: num_attackers
    trim_k: int | None = None        # default: num_attackers
    auror_threshold: float | None = None
    allow_ineffective_voting: bool = False

    # -- validation

    def partition_kind(self) -> tuple[str, float | None]:
        """("iid", None) or ("dirichlet", alpha)."""
        if self.partition == "iid":
            return "iid", None
        if self.partition.startswith("dirichlet:"):
            return "dirichlet", float(self.partition.split(":", 1)[1])
        raise ConfigError([f"partition: unknown scheme {self.partition!r}"])

    def validate(self) -> "ExperimentConfig":
        bad = []
        positive = [("rounds", self.rounds), ("batch_size", self.batch_size),
                    ("vote_interval", self.vote_interval),
                    ("vote_threshold", self.vote_threshold),
                    ("num_classes", self.num_classes),
                    ("samples_per_class", self.samples_per_class),
                    ("ae.hidden", self.ae.hidden)]
        for name, value in positive:
            if value < 1:
                bad.append(f"{name}: must be >= 1, got {value}")
        nonneg = [("num_benign", self.num_benign),
                  ("num_attackers", self.num_attackers),
                  ("local_epochs", self.local_epochs),
                  ("client_lr", self.client_lr),
                  ("noise_sigma", self.noise_sigma),
                  ("ae.epochs", self.ae.epochs),
                  ("ae.weight_decay", self.ae.weight_decay),
                  ("alpha_threshold", self.alpha_threshold)]
        for name, value in nonneg:
            if value < 0:
                bad.append(f"{name}: must be >= 0, got {value}")
        if self.num_benign < 1:
            bad.append("num_benign: need at least one benign client")
        if self.defense not in DEFENSES:
            bad.append(f"defense: unknown {self.defense!r}, "
                       f"choose from {DEFENSES}")
        if self.client_optimizer not in OPTIMIZERS:
            bad.append(f"client_optimizer: unknown {self.client_optimizer!r}")
        if self.attack.strategy not in STRATEGIES:
            bad.append(f"attack.strategy: unknown {self.attack.strategy!r}")
        if self.attack.radius is not None and self.attack.radius < 0:
            bad.append("attack.radius: must be >= 0")
        if self.attack.strategy == "grad_ascent" and self.attack.steps < 1:
            bad.append("attack.steps: grad_ascent needs >= 1")
        if (self.vote_threshold > self.vote_interval
                and not self.allow_ineffective_voting):
            bad.append("vote_threshold: exceeds vote_interval, so voting "
                       "can never exclude; set allow_ineffective_voting "
                       "to accept")
        try:
            kind, alpha = self.partition_kind()
            if kind == "dirichlet" and (alpha is None or alpha <= 0):
                bad.append("partition: dirichlet alpha must be > 0")
        except ConfigError as err:
            bad.extend(err.problems)
        except ValueError:
            bad.append(f"partition: cannot parse {self.partition!r}")
        if bad:
            raise ConfigError(bad)
        return self

    # -- serialization

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown field {k!r}" for k in unknown])
        if "attack" in data and isinstance(data["attack"], dict):
            data["attack"] = AttackSettings(**data["attack"])
        if "ae" in data and isinstance(data["ae"], dict):
            data["ae"] = AeSettings(**data["ae"])
        return cls(**data)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(["config file must hold a mapping"])
        return cls.from_dict(data)

    def to_yaml(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def override(self, **changes) -> "ExperimentConfig":
        """Copy with top-level fields replaced (CLI flag precedence)."""
        data = self.to_dict()
        for key, value in changes.items():
            if value is None:
                continue
            if key not in data:
                raise ConfigError([f"unknown field {key!r}"])
            data[key] = value
        return ExperimentConfig.from_dict(data)
