"""Synthetic longitudinal image generator with known generative factors.

Each image is a smooth phantom on a uniform grid over [-1, 1]^2 (or ^3):
an outer tissue disc whose radius tracks the head-size factor, containing
a central dark cavity (the "ventricle") whose radius grows monotonically
with the age factor, all scaled by a tissue-intensity factor. Logistic
boundaries keep the image differentiable in every factor, so finite
differences against the generator are well conditioned.

Factor layout: ``alpha[0]`` age, ``alpha[1]`` head size, ``alpha[2]``
tissue intensity. Subjects are longitudinal: the non-age factors are
drawn once per subject and held fixed across visits, while the age factor
advances linearly in time at a group-specific speed (the diseased group
progresses 1.5x faster than controls).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import GenerationError, InvalidFactor
from .tensorfile import write_tensor

BOUNDARY_SHARPNESS = 12.0


@dataclass
class CohortConfig:
    """Population model for one generated dataset."""

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

    def validate(self):
        if self.grid < 8:
            raise ValueError(f"grid must be >= 8, got {self.grid}")
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.diseased_fraction <= 1:
            raise ValueError("diseased_fraction must lie in [0, 1]")
        if self.visits_min < 1 or self.visits_max < self.visits_min:
            raise ValueError("need 1 <= visits_min <= visits_max")
        if self.n_factors < 2:
            raise ValueError("need at least 2 generative factors")


@dataclass
class Visit:
    time_years: float
    factors: np.ndarray
    image_path: str = ""


@dataclass
class SubjectTrajectory:
    subject_id: str
    group: str  # "control" | "diseased"
    visits: list[Visit] = field(default_factory=list)


@dataclass
class DatasetManifest:
    subjects: list[SubjectTrajectory]
    config: CohortConfig
    seed: int

    @property
    def n_images(self) -> int:
        return sum(len(s.visits) for s in self.subjects)


def _check_factors(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.shape[0] < 2:
        raise InvalidFactor(f"factor vector must be 1-D with >= 2 entries, got shape {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise InvalidFactor(f"factor vector contains non-finite values: {alpha}")
    return alpha


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def tissue_radius(head_size: float) -> float:
    """Outer disc radius as a function of the head-size factor."""
    return 0.70 + 0.10 * np.tanh(head_size)


def ventricle_radius(age_factor: float) -> float:
    """Central cavity radius; strictly increasing in the age factor."""
    return 0.10 + 0.35 * _sigmoid(age_factor)


def tissue_intensity(intensity_factor: float) -> float:
    """Peak tissue brightness as a function of the intensity factor."""
    return 0.8 + 0.2 * np.tanh(intensity_factor)


def pixel_coordinates(grid: int, dim: int = 2) -> np.ndarray:
    """Radial coordinate of each pixel on the uniform [-1, 1]^dim grid."""
    axis = np.linspace(-1.0, 1.0, grid)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.sqrt(sum(m * m for m in mesh))


def render_image(alpha, grid: int = 32, noise_sigma: float = 0.0,
                 noise_seed: int = 0, dim: int = 2) -> np.ndarray:
    """Render one phantom image from a factor vector.

    The deterministic part is T * s(R_tissue - r) * (1 - s(R_vent - r))
    with s the logistic at sharpness 12; additive Gaussian pixel noise is
    seeded by ``noise_seed`` so identical calls are bit-identical.
    """
    alpha = _check_factors(alpha)
    if grid < 8:
        raise ValueError(f"grid must be >= 8, got {grid}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    r = pixel_coordinates(grid, dim)
    r_tissue = tissue_radius(alpha[1])
    r_vent = ventricle_radius(alpha[0])
    peak = tissue_intensity(alpha[2]) if alpha.shape[0] >= 3 else tissue_intensity(0.0)
    img = peak * _sigmoid(BOUNDARY_SHARPNESS * (r_tissue - r)) \
        * (1.0 - _sigmoid(BOUNDARY_SHARPNESS * (r_vent - r)))
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(noise_seed))
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return img


def perturb_factor(alpha, j: int, delta: float) -> np.ndarray:
    """Return a copy of ``alpha`` with entry ``j`` shifted by ``delta``."""
    alpha = _check_factors(alpha)
    if not 0 <= j < alpha.shape[0]:
        raise IndexError(f"factor index {j} out of range for {alpha.shape[0]} factors")
    out = alpha.copy()
    out[j] += delta
    return out


def ventricle_dark_area(image: np.ndarray, threshold: float, radius: float) -> int:
    """Count pixels darker than ``threshold`` within radial distance ``radius``.

    With the generator's defaults the dark set is exactly the ventricle
    core, so the count is a monotone proxy for the cavity size.
    """
    image = np.asarray(image)
    r = pixel_coordinates(image.shape[0], image.ndim)
    if r.shape != image.shape:
        raise ValueError(f"image shape {image.shape} is not a square grid")
    return int(np.count_nonzero((image < threshold) & (r < radius)))


def _derived_seed(*key: int) -> int:
    """Stable 64-bit stream seed for a (root seed, index, ...) tuple."""
    state = np.random.SeedSequence(list(key)).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def sample_subject(rng_seed: int, group: str, config: CohortConfig,
                   subject_id: str = "") -> SubjectTrajectory:
    """Draw one subject's factor trajectory.

    Baseline age ~ U(low, high); visit count ~ U{visits_min..visits_max};
    visits at annual intervals. The age factor follows
    speed * (age - center) / scale + intercept with the intercept drawn
    once per subject, as are the non-age factors.
    """
    config.validate()
    if group not in ("control", "diseased"):
        raise ValueError(f"unknown group {group!r}")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    baseline_age = rng.uniform(config.baseline_age_low, config.baseline_age_high)
    n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))
    intercept = rng.normal(0.0, config.intercept_sigma)
    fixed = rng.normal(0.0, 1.0, size=config.n_factors - 1)
    speed = config.control_speed if group == "control" else config.diseased_speed
    visits = []
    for k in range(n_visits):
        age = baseline_age + k * config.visit_interval_years
        age_factor = speed * (age - config.age_center) / config.age_scale + intercept
        factors = np.concatenate([[age_factor], fixed])
        visits.append(Visit(time_years=age, factors=factors))
    return SubjectTrajectory(subject_id=subject_id, group=group, visits=visits)


def build_manifest(config: CohortConfig, seed: int) -> DatasetManifest:
    """Sample the whole cohort (deterministic in ``seed``), without images."""
    config.validate()
    n_diseased = int(round(config.n_subjects * config.diseased_fraction))
    n_control = config.n_subjects - n_diseased
    subjects = []
    for idx in range(config.n_subjects):
        group = "control" if idx < n_control else "diseased"
        subject = sample_subject(_derived_seed(seed, idx), group, config,
                                 subject_id=f"s{idx:04d}")
        subjects.append(subject)
    return DatasetManifest(subjects=subjects, config=config, seed=seed)


def generate_dataset(config: CohortConfig, out_dir: str | Path,
                     seed: int = 17) -> DatasetManifest:
    """Render and write a full dataset: tensor files plus JSONL manifest.

    Per-image noise streams are derived from (seed, subject index, visit
    index), so regeneration with the same seed is byte-identical and
    subjects could be rendered in parallel without changing the output.
    """
    manifest = build_manifest(config, seed)
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for idx, subject in enumerate(manifest.subjects):
            for k, visit in enumerate(subject.visits):
                rel = f"images/{subject.subject_id}_v{k:02d}.ten"
                img = render_image(visit.factors, grid=config.grid,
                                   noise_sigma=config.noise_sigma,
                                   noise_seed=_derived_seed(seed, idx, k),
                                   dim=config.dim)
                write_tensor(out_dir / rel, img)
                visit.image_path = rel
        write_manifest(manifest, out_dir)
    except OSError as exc:
        raise GenerationError(f"failed writing dataset to {out_dir}: {exc}") from exc
    return manifest


def write_manifest(manifest: DatasetManifest, out_dir: str | Path) -> None:
    """Write the JSONL visit manifest and the generator config snapshot."""
    out_dir = Path(out_dir)
    lines = []
    for subject in manifest.subjects:
        for k, visit in enumerate(subject.visits):
            lines.append(json.dumps({
                "subject_id": subject.subject_id,
                "group": subject.group,
                "visit_index": k,
                "time_years": visit.time_years,
                "factors": [float(v) for v in visit.factors],
                "image_path": visit.image_path,
            }, sort_keys=True))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    snapshot = {"seed": manifest.seed, "config": asdict(manifest.config)}
    (out_dir / "generator_config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
