"""Run configuration: one strict, fully-defaulted JSON document.

Every knob of every stage is materialized with its default so a config
file snapshot pins an experiment exactly. Loading rejects unknown keys
and wrong types outright; silent default drift is how experiments rot.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# JSON key -> attribute aliases (``lambda`` is a Python keyword)
_ALIASES = {"lambda": "alignment_weight"}


@dataclass
class SynthgenSection:
    n_subjects: int = 200
    diseased_fraction: float = 0.5
    grid: int = 32
    dim: int = 2
    noise_sigma: float = 0.02
    visits_min: int = 2
    visits_max: int = 5
    visit_interval_years: float = 1.0
    baseline_age_low: float = 50.0
    baseline_age_high: float = 80.0
    age_center: float = 65.0
    age_scale: float = 15.0
    control_speed: float = 1.0
    diseased_speed: float = 1.5
    intercept_sigma: float = 0.1
    n_factors: int = 3


@dataclass
class ModelSection:
    dim: int = 2
    grid: int = 32
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 8])
    latent: int = 32


@dataclass
class TrainerSection:
    epochs: int = 30
    batch_images: int = 64
    batch_pairs: int = 64
    learning_rate: float = 1e-3
    alignment_weight: float | str = "auto"
    min_gap_years: float = 1.0
    eval_every: int = 1
    threads: int = 1


@dataclass
class AnalysisSection:
    normalize_population: str = "control"   # "control" | "all"
    traversal_points: int = 5
    traversal_percentiles: list[float] = field(default_factory=lambda: [5.0, 95.0])
    dark_threshold: float = 0.08            # 0.1 * nominal tissue intensity
    dark_radius: float = 0.70               # nominal tissue radius


@dataclass
class VerifySection:
    n_probes: int = 64
    probe_delta: float = 0.25
    age_factor_low: float = -1.5
    age_factor_high: float = 1.5
    holdout_subjects: int = 100
    holdout_seed_offset: int = 1000


@dataclass
class DownstreamSection:
    k_folds: int = 5
    methods: list[str] = field(default_factory=lambda: ["lssl", "ae"])
    heads: list[str] = field(default_factory=lambda: ["mlp", "gru"])
    modes: list[str] = field(default_factory=lambda: ["frozen"])
    classifier_epochs: int = 250
    classifier_lr: float = 3e-3
    classifier_batch: int = 16
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    beta: float = 4.0
    split_seed: int = 17


@dataclass
class RunConfig:
    seed: int = 17
    synthgen: SynthgenSection = field(default_factory=SynthgenSection)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    verify: VerifySection = field(default_factory=VerifySection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)

    def validate(self):
        if self.synthgen.n_subjects < 1:
            raise ConfigError("synthgen.n_subjects must be positive")
        if self.model.grid != self.synthgen.grid or self.model.dim != self.synthgen.dim:
            raise ConfigError("model grid/dim must match synthgen grid/dim")
        if self.analysis.normalize_population not in ("control", "all"):
            raise ConfigError("analysis.normalize_population must be 'control' or 'all'")
        if self.analysis.traversal_points < 2:
            raise ConfigError("analysis.traversal_points must be >= 2")
        for m in self.downstream.methods:
            if m not in ("lssl", "ae", "vae", "beta_vae"):
                raise ConfigError(f"unknown downstream method {m!r}")
        for h in self.downstream.heads:
            if h not in ("mlp", "gru"):
                raise ConfigError(f"unknown downstream head {h!r}")
        for m in self.downstream.modes:
            if m not in ("frozen", "fine_tune", "no_pretrain"):
                raise ConfigError(f"unknown downstream mode {m!r}")
        if not self.downstream.seeds:
            raise ConfigError("downstream.seeds must not be empty")


def _coerce(value, target_type, path):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


_SECTIONS = {
    "synthgen": SynthgenSection,
    "model": ModelSection,
    "trainer": TrainerSection,
    "analysis": AnalysisSection,
    "verify": VerifySection,
    "downstream": DownstreamSection,
}


def _fill_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for raw_key, value in data.items():
        key = _ALIASES.get(raw_key, raw_key)
        if key not in fields:
            raise ConfigError(f"{path}.{raw_key}: unknown key")
        f = fields[key]
        sub_path = f"{path}.{raw_key}"
        if cls is RunConfig and key in _SECTIONS:
            kwargs[key] = _fill_section(_SECTIONS[key], value, sub_path)
        elif key == "alignment_weight":
            if value != "auto" and not isinstance(value, (int, float)):
                raise ConfigError(f"{sub_path}: expected a number or 'auto'")
            kwargs[key] = value if value == "auto" else float(value)
        elif key in ("widths", "traversal_percentiles", "seeds"):
            if not isinstance(value, list):
                raise ConfigError(f"{sub_path}: expected a list")
            kwargs[key] = list(value)
        elif key in ("methods", "heads", "modes"):
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{sub_path}: expected a list of strings")
            kwargs[key] = list(value)
        elif isinstance(f.default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{sub_path}: expected a boolean")
            kwargs[key] = value
        elif isinstance(f.default, float):
            kwargs[key] = _coerce(value, float, sub_path)
        elif isinstance(f.default, int):
            kwargs[key] = _coerce(value, int, sub_path)
        elif isinstance(f.default, str):
            kwargs[key] = _coerce(value, str, sub_path)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _fill_section(RunConfig, data, "config")
    cfg.validate()
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> RunConfig:
    """Read, validate, and apply the LSSL_SEED override if set."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    cfg = from_dict(data)
    env_seed = os.environ.get("LSSL_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"LSSL_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def cohort_config(cfg: RunConfig):
    from .synthgen import CohortConfig

    s = cfg.synthgen
    return CohortConfig(
        n_subjects=s.n_subjects, diseased_fraction=s.diseased_fraction, grid=s.grid,
        dim=s.dim, noise_sigma=s.noise_sigma, visits_min=s.visits_min,
        visits_max=s.visits_max, visit_interval_years=s.visit_interval_years,
        baseline_age_low=s.baseline_age_low, baseline_age_high=s.baseline_age_high,
        age_center=s.age_center, age_scale=s.age_scale, control_speed=s.control_speed,
        diseased_speed=s.diseased_speed, intercept_sigma=s.intercept_sigma,
        n_factors=s.n_factors)


def arch_config(cfg: RunConfig):
    from .model import ArchConfig

    m = cfg.model
    return ArchConfig(dim=m.dim, grid=m.grid, widths=tuple(m.widths), latent=m.latent)


def train_config(cfg: RunConfig):
    from .trainer import TrainConfig

    t = cfg.trainer
    return TrainConfig(epochs=t.epochs, batch_images=t.batch_images,
                       batch_pairs=t.batch_pairs, learning_rate=t.learning_rate,
                       alignment_weight=t.alignment_weight, seed=cfg.seed,
                       min_gap_years=t.min_gap_years, eval_every=t.eval_every,
                       threads=t.threads)
