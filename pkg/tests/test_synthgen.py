import json
import math

import numpy as np
import pytest

from lssl import synthgen
from lssl.errors import InvalidFactor
from lssl.synthgen import (CohortConfig, build_manifest, generate_dataset,
                           perturb_factor, render_image, sample_subject,
                           tissue_intensity, tissue_radius, ventricle_dark_area,
                           ventricle_radius)


def reference_render(alpha, grid):
    """Independent scalar-loop oracle for the noise-free image."""
    a1, a2, a3 = alpha
    rb = 0.70 + 0.10 * math.tanh(a2)
    rv = 0.10 + 0.35 / (1.0 + math.exp(-a1))
    peak = 0.8 + 0.2 * math.tanh(a3)
    axis = [(-1.0 + 2.0 * i / (grid - 1)) for i in range(grid)]
    img = np.empty((grid, grid))
    for i, x in enumerate(axis):
        for j, y in enumerate(axis):
            r = math.sqrt(x * x + y * y)
            s_outer = 1.0 / (1.0 + math.exp(-12.0 * (rb - r)))
            s_inner = 1.0 / (1.0 + math.exp(-12.0 * (rv - r)))
            img[i, j] = peak * s_outer * (1.0 - s_inner)
    return img


def test_center_pixel_closed_form():
    # frozen from the closed form at alpha = 0: 0.8 * s(8.4) * (1 - s(3.3))
    img = render_image(np.zeros(3), grid=33, noise_sigma=0.0)
    assert img[16, 16] == pytest.approx(0.028450553818200407, abs=1e-12)


def test_matches_independent_oracle():
    alpha = np.array([0.7, -0.3, 0.5])
    img = render_image(alpha, grid=16)
    assert np.allclose(img, reference_render(alpha, 16), atol=1e-12)


def test_ventricle_radius_limit():
    # sigmoid saturates: radius tends to 0.10 + 0.35
    assert ventricle_radius(50.0) == pytest.approx(0.45, abs=1e-9)
    assert ventricle_radius(-50.0) == pytest.approx(0.10, abs=1e-9)


def test_render_deterministic_with_seed():
    alpha = np.array([0.2, 0.1, -0.4])
    a = render_image(alpha, grid=32, noise_sigma=0.05, noise_seed=123)
    b = render_image(alpha, grid=32, noise_sigma=0.05, noise_seed=123)
    assert np.array_equal(a, b)
    c = render_image(alpha, grid=32, noise_sigma=0.05, noise_seed=124)
    assert not np.array_equal(a, c)


def test_render_rejects_bad_factors():
    with pytest.raises(InvalidFactor):
        render_image(np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(InvalidFactor):
        render_image(np.array([1.0]))


def test_perturb_factor():
    alpha = np.zeros(3)
    assert np.array_equal(perturb_factor(alpha, 0, 0.0), alpha)
    assert np.allclose(perturb_factor(alpha, 1, 0.5), [0.0, 0.5, 0.0])
    assert np.array_equal(alpha, np.zeros(3))  # original untouched
    with pytest.raises(IndexError):
        perturb_factor(alpha, 3, 0.1)


def test_age_perturbation_changes_only_ventricle_region():
    alpha = np.zeros(3)
    delta = 0.25
    base = render_image(alpha, grid=32)
    pert = render_image(perturb_factor(alpha, 0, delta), grid=32)
    diff = np.abs(pert - base)
    r = synthgen.pixel_coordinates(32)
    significant = diff >= 0.05 * diff.max()
    # meaningful change stays near the cavity boundary (logistic tails
    # decay as exp(-12 d)); the outer tissue ring is untouched
    assert r[significant].max() <= ventricle_radius(delta) + 0.35
    peak_r = r[np.unravel_index(np.argmax(diff), diff.shape)]
    assert ventricle_radius(0.0) - 0.1 <= peak_r <= ventricle_radius(delta) + 0.1
    outer_ring = (r >= 0.69) & (r <= 0.71)
    assert diff[outer_ring].max() < 0.05 * diff.max()


def test_dark_area_monotone_in_age_factor():
    areas = []
    for a1 in np.linspace(-3, 3, 25):
        img = render_image(np.array([a1, 0.0, 0.0]), grid=32)
        areas.append(ventricle_dark_area(img, threshold=0.1 * tissue_intensity(0.0),
                                         radius=tissue_radius(0.0)))
    assert all(b >= a for a, b in zip(areas, areas[1:]))
    assert areas[-1] > areas[0]


def test_sample_subject_trajectory_model():
    cfg = CohortConfig()
    subj = sample_subject(42, "diseased", cfg, subject_id="x")
    times = [v.time_years for v in subj.visits]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert 2 <= len(subj.visits) <= 5
    # non-age factors frozen across visits; age factor strictly increasing
    fixed = np.array([v.factors[1:] for v in subj.visits])
    assert np.all(fixed == fixed[0])
    ages = np.array([v.factors[0] for v in subj.visits])
    assert np.all(np.diff(ages) > 0)
    # diseased progression: exactly 1.5/15 = 0.1 per annual visit
    assert np.allclose(np.diff(ages), 0.1, atol=1e-12)
    # intercept = alpha1 - speed*(t-65)/15 identical at every visit
    intercepts = [v.factors[0] - 1.5 * (v.time_years - 65.0) / 15.0 for v in subj.visits]
    assert np.allclose(intercepts, intercepts[0], atol=1e-12)


def test_sample_subject_control_rate():
    cfg = CohortConfig()
    subj = sample_subject(7, "control", cfg)
    ages = np.array([v.factors[0] for v in subj.visits])
    assert np.allclose(np.diff(ages), 1.0 / 15.0, atol=1e-12)


def test_sample_subject_deterministic():
    cfg = CohortConfig()
    a = sample_subject(5, "control", cfg)
    b = sample_subject(5, "control", cfg)
    assert [v.time_years for v in a.visits] == [v.time_years for v in b.visits]
    assert all(np.array_equal(x.factors, y.factors)
               for x, y in zip(a.visits, b.visits))


def test_manifest_balance_and_independence():
    cfg = CohortConfig(n_subjects=200)
    manifest = build_manifest(cfg, seed=17)
    groups = [s.group for s in manifest.subjects]
    assert groups.count("control") == 100 and groups.count("diseased") == 100
    ids = [s.subject_id for s in manifest.subjects]
    assert len(set(ids)) == len(ids)
    # age-intercept residual decorrelated from the head-size factor
    intercepts, heads = [], []
    for s in manifest.subjects:
        speed = 1.0 if s.group == "control" else 1.5
        v = s.visits[0]
        intercepts.append(v.factors[0] - speed * (v.time_years - 65.0) / 15.0)
        heads.append(v.factors[1])
    corr = np.corrcoef(intercepts, heads)[0, 1]
    assert abs(corr) < 0.15


def test_generate_dataset_deterministic(tmp_path):
    cfg = CohortConfig(n_subjects=6, grid=16)
    generate_dataset(cfg, tmp_path / "a", seed=3)
    generate_dataset(cfg, tmp_path / "b", seed=3)
    ma = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    mb = (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert ma == mb
    ga = (tmp_path / "a" / "generator_config.json").read_bytes()
    gb = (tmp_path / "b" / "generator_config.json").read_bytes()
    assert ga == gb
    for rec in [json.loads(l) for l in ma.decode().splitlines()]:
        ia = (tmp_path / "a" / rec["image_path"]).read_bytes()
        ib = (tmp_path / "b" / rec["image_path"]).read_bytes()
        assert ia == ib


def test_generate_dataset_alpha_invariants(tmp_path):
    cfg = CohortConfig(n_subjects=8, grid=16)
    manifest = generate_dataset(cfg, tmp_path / "ds", seed=11)
    for s in manifest.subjects:
        fixed = np.array([v.factors[1:] for v in s.visits])
        assert np.all(fixed == fixed[0])
        a1 = [v.factors[0] for v in s.visits]
        assert all(b > a for a, b in zip(a1, a1[1:]))
