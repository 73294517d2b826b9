"""Empirical disentanglement checks against the generator's ground truth.

Three instruments, all evaluated at finite perturbations because the
encoder is only piecewise smooth:

* colinearity score: mean cosine between within-subject representation
  changes and the learned direction (the condition the training enforces);
* perturbation ratio: brain-age displacement caused by a non-age factor
  perturbation, relative to the mean displacement caused by the same-size
  age perturbation (the condition the training does NOT enforce; this
  measures, it never enforces);
* population correlations between brain age and each true factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import synthgen
from .analysis import pearson, spearman
from .errors import DegenerateSet, InsufficientData, ZeroReference
from .objective import DEGENERATE_EPS


@dataclass
class Probe:
    base: np.ndarray
    factor: int
    delta: float


def make_probe_set(n_bases: int = 64, delta: float = 0.25, seed: int = 0,
                   age_factor_range: tuple[float, float] = (-1.5, 1.5),
                   n_factors: int = 3) -> list[Probe]:
    """Probes covering every factor at each of ``n_bases`` random bases.

    Bases follow the generated population: age factor uniform over the
    trained range, the other factors standard normal.
    """
    if delta == 0:
        raise ValueError("probe delta must be nonzero")
    rng = np.random.Generator(np.random.PCG64(seed))
    probes = []
    for _ in range(n_bases):
        base = np.empty(n_factors)
        base[0] = rng.uniform(*age_factor_range)
        base[1:] = rng.normal(0.0, 1.0, size=n_factors - 1)
        for j in range(n_factors):
            probes.append(Probe(base=base.copy(), factor=j, delta=delta))
    return probes


def colinearity_score(z_earlier, z_later, direction,
                      eps: float = DEGENERATE_EPS) -> tuple[float, int]:
    """Mean cosine between (later - earlier) and the direction.

    Degenerate pairs are excluded from the mean and counted; a fully
    degenerate set is an error.
    """
    z_earlier = np.asarray(z_earlier, dtype=np.float64)
    z_later = np.asarray(z_later, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    delta = z_later - z_earlier
    norms = np.linalg.norm(delta, axis=-1)
    keep = norms >= eps
    n_degenerate = int((~keep).sum())
    if not keep.any():
        raise DegenerateSet("every pair has a numerically zero representation change")
    cos = (delta[keep] @ direction) / norms[keep]
    return float(cos.mean()), n_degenerate


def condition1_score(net, dataset, pairs) -> float:
    """Colinearity score of a model over a pair set from one dataset."""
    z = net.encode_numpy(dataset.images)
    e_idx = np.array([dataset.image_index_by_path[p.earlier_ref] for p in pairs])
    l_idx = np.array([dataset.image_index_by_path[p.later_ref] for p in pairs])
    score, _ = colinearity_score(z[e_idx], z[l_idx], net.direction_numpy())
    return score


@dataclass
class RatioSummary:
    mean: float
    max: float
    n: int


def condition2_score(net, probes: list[Probe], renderer=None,
                     grid: int | None = None, dim: int = 2) -> dict[int, RatioSummary]:
    """Brain-age displacement ratios for each non-age factor.

    For every probe with factor j > 0, the displacement |psi(render(base
    + delta e_j)) - psi(render(base))| is divided by the mean displacement
    over the age-factor (j = 0) probes. Rendering is noise-free; the ratio
    is invariant to affine renormalization of the brain-age score.
    """
    if not probes:
        raise ValueError("probe set is empty")
    if renderer is None:
        grid = grid or net.arch.grid
        renderer = lambda alpha: synthgen.render_image(alpha, grid=grid, noise_sigma=0.0, dim=dim)
    if not any(p.factor == 0 for p in probes):
        raise ValueError("probe set must include age-factor reference perturbations")

    bases = [p.base for p in probes]
    shifted = [synthgen.perturb_factor(p.base, p.factor, p.delta) for p in probes]
    images = np.stack([renderer(a) for a in bases + shifted]).astype(np.float32)
    z = net.encode_numpy(images)
    psi = z @ net.direction_numpy()
    displacement = np.abs(psi[len(probes):] - psi[:len(probes)])

    ref = np.array([d for p, d in zip(probes, displacement) if p.factor == 0])
    ref_mean = float(ref.mean())
    if ref_mean < 1e-12:
        raise ZeroReference("age-factor perturbations produce zero brain-age displacement")
    summaries: dict[int, RatioSummary] = {}
    factors = sorted({p.factor for p in probes if p.factor != 0})
    for j in factors:
        ratios = np.array([d for p, d in zip(probes, displacement) if p.factor == j]) / ref_mean
        summaries[j] = RatioSummary(mean=float(ratios.mean()), max=float(ratios.max()),
                                    n=int(ratios.size))
    return summaries


@dataclass
class FactorCorrelations:
    pearson_by_factor: dict[int, float]
    spearman_age: float
    flags: list[str] = field(default_factory=list)


def factor_independence_report(brain_ages, factors) -> FactorCorrelations:
    """Correlation of brain age with each true factor across a population.

    Pearson per factor plus Spearman against the age factor. Constant
    brain age makes every correlation undefined; that is flagged per
    factor rather than raised, but fewer than 3 samples is an error.
    """
    brain_ages = np.asarray(brain_ages, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if brain_ages.size < 3:
        raise InsufficientData(f"need >= 3 samples, got {brain_ages.size}")
    flags = []
    pearsons = {}
    for j in range(factors.shape[1]):
        r = pearson(brain_ages, factors[:, j])
        if np.isnan(r):
            flags.append(f"correlation with factor {j} undefined (zero variance)")
        pearsons[j] = float(r)
    rho = spearman(brain_ages, factors[:, 0])
    if np.isnan(rho):
        flags.append("rank correlation with the age factor undefined (zero variance)")
    return FactorCorrelations(pearson_by_factor=pearsons, spearman_age=float(rho), flags=flags)


@dataclass
class DisentanglementReport:
    condition1_mean_cosine: float
    condition1_n_pairs: int
    condition1_n_degenerate: int
    condition2_ratios: dict[int, RatioSummary]
    condition2_delta: float
    correlations: FactorCorrelations
    holdout_subjects: int
    holdout_images: int

    def to_json(self) -> str:
        d = asdict(self)
        d["condition2_ratios"] = {str(k): v for k, v in asdict(self)["condition2_ratios"].items()}
        return json.dumps(d, indent=2, sort_keys=True)


def run_verify(train_dataset, net, cohort_config, seed: int,
               min_gap_years: float = 1.0, n_probes: int = 64,
               probe_delta: float = 0.25,
               age_factor_range: tuple[float, float] = (-1.5, 1.5),
               holdout_subjects: int = 100,
               holdout_seed_offset: int = 1000) -> DisentanglementReport:
    """Produce the full disentanglement report for one trained model.

    Colinearity is scored over the training pair set; correlations use a
    freshly generated held-out cohort (same population model, shifted
    seed); perturbation ratios use noise-free renders at the model grid.
    """
    import dataclasses

    from .analysis import normalize_brain_age
    from .data import render_cohort
    from .objective import build_pairs

    pairs = build_pairs(train_dataset.records, min_gap_years)
    z_train = net.encode_numpy(train_dataset.images)
    e_idx = np.array([train_dataset.image_index_by_path[p.earlier_ref] for p in pairs])
    l_idx = np.array([train_dataset.image_index_by_path[p.later_ref] for p in pairs])
    direction = net.direction_numpy()
    cond1, n_degenerate = colinearity_score(z_train[e_idx], z_train[l_idx], direction)

    holdout_cfg = dataclasses.replace(cohort_config, n_subjects=holdout_subjects)
    holdout = render_cohort(holdout_cfg, seed + holdout_seed_offset)
    raw = net.encode_numpy(holdout.images) @ direction
    normalized = normalize_brain_age(raw, holdout.times)
    correlations = factor_independence_report(normalized, holdout.factors)

    probes = make_probe_set(n_bases=n_probes, delta=probe_delta, seed=seed,
                            age_factor_range=age_factor_range,
                            n_factors=cohort_config.n_factors)
    ratios = condition2_score(net, probes, grid=cohort_config.grid, dim=cohort_config.dim)

    return DisentanglementReport(
        condition1_mean_cosine=cond1,
        condition1_n_pairs=len(pairs),
        condition1_n_degenerate=n_degenerate,
        condition2_ratios=ratios,
        condition2_delta=probe_delta,
        correlations=correlations,
        holdout_subjects=holdout_subjects,
        holdout_images=holdout.n_images)
