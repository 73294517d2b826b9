"""Brain-age analysis: projection, normalization, slopes, trends, traversal.

The pipeline mirrors the study protocol: project every representation
onto the learned unit direction to get a raw brain-age score, moment-match
the scores to the chronological ages of a reference population (the
direction is only determined up to scale), regress each subject's score
on age to get a per-subject aging speed, compare speeds across groups
with Welch's t-test, fit the population age trend with a random-intercept
proxy, and decode synthetic average images along the direction.

Student-t tail probabilities are evaluated by a continued-fraction
regularized incomplete beta, so the module has no statistics-library
dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateDistribution, EmptyInput, InsufficientData,
                     ShapeError, SingularFit)


@dataclass
class AnalysisRecord:
    subject_id: str
    group: str
    ages: list[float]
    brain_age_raw: list[float]
    brain_age: list[float] = field(default_factory=list)   # normalized
    slope: float | None = None


@dataclass
class TrendFit:
    intercept: float
    linear: float
    quadratic: float
    residual_variance: float
    n: int


def project_brain_age(z, direction) -> float:
    """Scalar brain age: inner product of a representation with the direction."""
    z = np.asarray(z, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if z.shape != direction.shape:
        raise ShapeError(f"representation shape {z.shape} vs direction {direction.shape}")
    return float(np.dot(z, direction))


def moment_match_map(scores, ages) -> tuple[float, float]:
    """Affine map (scale, offset) matching score moments to age moments.

    The scale is positive, so orderings and per-subject slope signs are
    preserved. Population (ddof=0) moments on both sides.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    if scores.shape != ages.shape or scores.ndim != 1 or scores.size < 2:
        raise ValueError("need two same-length 1-D samples of size >= 2")
    s_std = float(scores.std())
    if s_std == 0.0:
        raise DegenerateDistribution("brain-age scores are constant; cannot moment-match")
    scale = float(ages.std()) / s_std
    offset = float(ages.mean()) - scale * float(scores.mean())
    return scale, offset


def normalize_brain_age(scores, ages) -> np.ndarray:
    """Affinely map scores so their mean/std equal those of the ages."""
    scale, offset = moment_match_map(scores, ages)
    return np.asarray(scores, dtype=np.float64) * scale + offset


def ols_slope(xs, ys) -> float | None:
    """Closed-form least-squares slope; None when x has no spread."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    dx = xs - xs.mean()
    denom = float((dx * dx).sum())
    if denom == 0.0:
        return None
    return float((dx * (ys - ys.mean())).sum() / denom)


def fit_subject_slopes(records: list[AnalysisRecord]) -> dict[str, float]:
    """Per-subject OLS slope of normalized brain age against age.

    Subjects with fewer than two visits (or no age spread) are omitted,
    not errors; fitted slopes are also written back onto the records.
    """
    slopes: dict[str, float] = {}
    for rec in records:
        if len(rec.ages) < 2:
            rec.slope = None
            continue
        slope = ols_slope(rec.ages, rec.brain_age)
        rec.slope = slope
        if slope is not None:
            slopes[rec.subject_id] = slope
    return slopes


def _log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _beta_cont_fraction(a: float, b: float, x: float, max_iter: int = 300,
                        eps: float = 1e-14) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def incomplete_beta(a: float, b: float, x: float,
                    one_minus_x: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b), accurate to ~1e-10.

    Callers that know 1-x to full precision (x near 1 loses it to
    rounding) should pass it via ``one_minus_x``.
    """
    xc = 1.0 - x if one_minus_x is None else one_minus_x
    if x <= 0.0:
        return 0.0
    if x >= 1.0 or xc <= 0.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log(xc) - _log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cont_fraction(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cont_fraction(b, a, xc) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    # both x and 1-x computed directly; near t = 0, 1 - df/(df+t^2)
    # would round away
    x = df / (df + t * t)
    xc = t * t / (df + t * t)
    tail = 0.5 * incomplete_beta(df / 2.0, 0.5, x, one_minus_x=xc)
    return tail if t >= 0 else 1.0 - tail


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided Welch unequal-variance t-test; returns (t, p).

    Degrees of freedom via Welch-Satterthwaite. When both samples have
    zero variance: p = 1 if the means agree, else p = 0 (infinite t).
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InsufficientData("each sample needs at least 2 observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.size, b.size
    se2 = va / na + vb / nb
    diff = float(a.mean() - b.mean())
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * student_t_sf(abs(t), df)
    return float(t), float(min(p, 1.0))


def fit_quadratic_trend(ages, scores, subject_ids) -> TrendFit:
    """Population age trend with a random-intercept proxy.

    Two-stage approximation of a quadratic mixed-effect fit: pooled OLS
    quadratic, then per-subject mean residuals subtracted as intercept
    offsets, then a refit. Exact for data with no subject offsets.
    """
    ages = np.asarray(ages, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    subject_ids = list(subject_ids)
    if len(np.unique(ages)) < 3:
        raise SingularFit("need at least 3 distinct ages for a quadratic fit")
    center = ages.mean()
    x = ages - center
    design = np.column_stack([np.ones_like(x), x, x * x])
    if np.linalg.matrix_rank(design) < 3:
        raise SingularFit("rank-deficient quadratic design")

    def _fit(y):
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return coef

    coef = _fit(scores)
    residuals = scores - design @ coef
    offsets = {}
    for sid in set(subject_ids):
        mask = np.array([s == sid for s in subject_ids])
        offsets[sid] = float(residuals[mask].mean())
    adjusted = scores - np.array([offsets[s] for s in subject_ids])
    coef = _fit(adjusted)
    final_res = adjusted - design @ coef
    dof = max(len(ages) - 3, 1)
    # expand centered polynomial c0 + c1 u + c2 u^2, u = age - center, to raw age
    c0, c1, c2 = (float(v) for v in coef)
    intercept = c0 - c1 * center + c2 * center * center
    linear = c1 - 2.0 * c2 * center
    return TrendFit(intercept=intercept, linear=linear, quadratic=c2,
                    residual_variance=float((final_res ** 2).sum() / dof),
                    n=int(len(ages)))


def traversal_representation(target: float, direction, reps) -> np.ndarray:
    """Representation at a chosen brain age: target along the direction plus
    the group-average component orthogonal to it."""
    direction = np.asarray(direction, dtype=np.float64)
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim == 1:
        reps = reps[None, :]
    if reps.size == 0:
        raise EmptyInput("need at least one representation for the orthogonal average")
    proj = reps @ direction
    ortho = reps - proj[:, None] * direction[None, :]
    return target * direction + ortho.mean(axis=0)


def simulate_brains(targets, net, reps) -> list[np.ndarray]:
    """Decode the traversal representation at each requested brain age."""
    direction = net.direction_numpy()
    zs = np.stack([traversal_representation(t, direction, reps) for t in targets])
    return list(net.decode_numpy(zs))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0.0:
        return math.nan
    return float((dx * dy).sum() / denom)


def rankdata(x) -> np.ndarray:
    """Average ranks (ties share the mean rank), 1-based."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    return pearson(rankdata(x), rankdata(y))


@dataclass
class AnalysisResult:
    normalization: dict
    records: list[AnalysisRecord]
    group_slopes: dict[str, dict]
    slope_ratio: float | None
    welch: dict
    trend_control: TrendFit | None
    traversal_targets: list[float]
    traversal_dark_areas: list[int]
    traversal_images: list[np.ndarray]
    decoder_constant: bool

    def to_json_dict(self) -> dict:
        return {
            "normalization": self.normalization,
            "subjects": [{
                "subject_id": r.subject_id, "group": r.group, "ages": r.ages,
                "brain_age_raw": r.brain_age_raw, "brain_age": r.brain_age,
                "slope": r.slope,
            } for r in self.records],
            "group_slopes": self.group_slopes,
            "slope_ratio": self.slope_ratio,
            "welch": self.welch,
            "trend_control": None if self.trend_control is None else vars(self.trend_control),
            "traversal": {
                "targets": self.traversal_targets,
                "dark_areas": self.traversal_dark_areas,
                "decoder_constant": self.decoder_constant,
            },
        }


def run_analysis(dataset, net, normalize_population: str = "control",
                 traversal_points: int = 5,
                 traversal_percentiles: tuple[float, float] = (5.0, 95.0),
                 dark_threshold: float = 0.08, dark_radius: float = 0.70) -> AnalysisResult:
    """Full brain-age analysis of one dataset under one trained model."""
    from .synthgen import ventricle_dark_area

    z = net.encode_numpy(dataset.images)
    direction = net.direction_numpy()
    raw = z @ direction

    if normalize_population == "control":
        ref_mask = np.array([dataset.groups[s] == "control" for s in dataset.subject_of])
        if not ref_mask.any():
            ref_mask = np.ones(dataset.n_images, dtype=bool)
    else:
        ref_mask = np.ones(dataset.n_images, dtype=bool)
    scale, offset = moment_match_map(raw[ref_mask], dataset.times[ref_mask])
    normalized = raw * scale + offset

    records = []
    for s_idx, sid in enumerate(dataset.subject_ids):
        idx = dataset.visits_of(s_idx)
        records.append(AnalysisRecord(
            subject_id=sid, group=dataset.groups[s_idx],
            ages=[float(v) for v in dataset.times[idx]],
            brain_age_raw=[float(v) for v in raw[idx]],
            brain_age=[float(v) for v in normalized[idx]]))
    fit_subject_slopes(records)

    group_slopes: dict[str, dict] = {}
    by_group: dict[str, list[float]] = {}
    for rec in records:
        if rec.slope is not None:
            by_group.setdefault(rec.group, []).append(rec.slope)
    for group, values in sorted(by_group.items()):
        arr = np.asarray(values)
        group_slopes[group] = {"n": int(arr.size), "mean": float(arr.mean()),
                               "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}

    slope_ratio = None
    welch = {}
    if "control" in by_group and "diseased" in by_group:
        mc = float(np.mean(by_group["control"]))
        if mc != 0.0:
            slope_ratio = float(np.mean(by_group["diseased"])) / mc
        t, p = welch_t_test(by_group["diseased"], by_group["control"])
        welch = {"t": t, "p": p}

    trend = None
    ctrl_records = [r for r in records if r.group == "control"] or records
    ages_flat = np.concatenate([r.ages for r in ctrl_records])
    scores_flat = np.concatenate([r.brain_age for r in ctrl_records])
    sids_flat = sum(([r.subject_id] * len(r.ages) for r in ctrl_records), [])
    if len(np.unique(ages_flat)) >= 3:
        trend = fit_quadratic_trend(ages_flat, scores_flat, sids_flat)

    lo, hi = np.percentile(raw, traversal_percentiles)
    targets = [float(v) for v in np.linspace(lo, hi, traversal_points)]
    images = simulate_brains(targets, net, z)
    dark = [ventricle_dark_area(img, dark_threshold, dark_radius) for img in images]
    spread = float(np.stack(images).std(axis=0).max()) if len(images) > 1 else 0.0
    decoder_constant = spread < 1e-6

    return AnalysisResult(
        normalization={"population": normalize_population, "scale": float(scale),
                       "offset": float(offset)},
        records=records, group_slopes=group_slopes, slope_ratio=slope_ratio,
        welch=welch, trend_control=trend, traversal_targets=targets,
        traversal_dark_areas=[int(v) for v in dark], traversal_images=images,
        decoder_constant=decoder_constant)


def write_analysis_outputs(result: AnalysisResult, out_dir) -> None:
    """Analysis bundle: report JSON, per-image CSV, traversal tensor files."""
    import csv as csv_mod
    import json as json_mod
    from pathlib import Path

    from .tensorfile import write_tensor

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "analysis.json").write_text(
        json_mod.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / "analysis.csv", "w", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["subject_id", "group", "age", "brain_age_raw", "brain_age", "slope"])
        for rec in result.records:
            for age, raw, norm in zip(rec.ages, rec.brain_age_raw, rec.brain_age):
                writer.writerow([rec.subject_id, rec.group, repr(age), repr(raw), repr(norm),
                                 "" if rec.slope is None else repr(rec.slope)])
    for i, img in enumerate(result.traversal_images):
        write_tensor(out_dir / f"traversal_{i:02d}.ten", img)
