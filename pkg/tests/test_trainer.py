import csv

import numpy as np
import pytest
import torch

from lssl import data, model as model_lib, objective, synthgen, trainer
from lssl.errors import DivergenceError, NoPairs
from lssl.trainer import (TrainConfig, gradient_check, gradient_check_total_loss,
                          train)

MICRO_ARCH = model_lib.ArchConfig(dim=2, grid=8, widths=(4, 8), latent=4)


@pytest.fixture(scope="module")
def tiny_dataset():
    cfg = synthgen.CohortConfig(n_subjects=10, grid=16, noise_sigma=0.02)
    return data.render_cohort(cfg, seed=5)


def smooth_micro_setup(seed: int = 0):
    """Micro model and batch positioned away from ReLU/max-pool kinks.

    ReLU nets are only piecewise smooth; central differences are a valid
    oracle only in a linear region. Positive weights, biases, and inputs
    keep every unit active, and the margins are asserted by the caller.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    net = model_lib.init_model(MICRO_ARCH, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name == "age_direction":
                continue
            if name.endswith("bias"):
                p.uniform_(0.05, 0.2, generator=gen)
            else:
                p.uniform_(0.02, 0.2, generator=gen)
    images = rng.uniform(0.1, 1.0, size=(3, 8, 8))
    earlier = rng.uniform(0.1, 1.0, size=(2, 8, 8))
    later = rng.uniform(0.1, 1.0, size=(2, 8, 8))
    return net, images, earlier, later


@pytest.fixture(scope="module")
def micro_batch():
    # seed chosen so the evaluation point clears both kink margins
    return smooth_micro_setup(seed=43)


class TestGradientCheck:
    def test_total_loss_gradients_match_finite_differences(self, micro_batch):
        net, images, earlier, later = micro_batch
        margins = trainer.kink_margins(
            net, torch.as_tensor(images), torch.as_tensor(earlier),
            torch.as_tensor(later))
        assert min(margins) > 1e-3, "evaluation point too close to a kink"
        report = gradient_check_total_loss(net, images, earlier, later, weight=0.7)
        assert report.passed, [vars(g) for g in report.groups]
        assert report.worst() <= 1e-4
        assert {g.name for g in report.groups} == {"encoder", "decoder", "direction"}
        n_params = sum(p.numel() for p in net.parameters())
        assert n_params <= 10_000
        assert sum(g.n_checked for g in report.groups) == n_params

    def test_zero_loss_configuration_has_zero_gradients(self):
        # decoder reproduces a constant-zero image batch perfectly and the
        # pair term is absent: every gradient vanishes
        net = model_lib.init_model(MICRO_ARCH, seed=2, dtype=torch.float64)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
            net.age_direction[0] = 1.0
        imgs = torch.zeros(2, 8, 8, dtype=torch.float64)

        def loss_fn():
            return objective.total_loss(imgs, None, None, net, 0.0).total

        report = gradient_check(net, loss_fn)
        assert report.passed
        for g in report.groups:
            assert g.max_abs_err_small <= 1e-8

    def test_direction_gradient_isolated_cosine_term(self, micro_batch):
        # only the alignment term sees the direction parameter, so its
        # finite differences must match the full-loss autograd gradient
        _, _, earlier, later = micro_batch
        net = model_lib.init_model(MICRO_ARCH, seed=3, dtype=torch.float64)
        pe = torch.as_tensor(earlier)
        pl = torch.as_tensor(later)
        weight = 1.3

        z_e = net.encode(pe).detach()
        z_l = net.encode(pl).detach()

        def cosine_only():
            cos, _ = objective.pair_cosines(z_l, z_e, net.age_direction)
            return -weight * cos.mean()

        net.zero_grad()
        imgs = torch.as_tensor(np.zeros((2, 8, 8)))
        full = objective.total_loss(imgs, pe, pl, net, weight).total
        full.backward()
        analytic = net.age_direction.grad.detach().clone()

        step = 1e-4
        with torch.no_grad():
            flat = net.age_direction.data
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(cosine_only())
                flat[i] = orig - step
                lo = float(cosine_only())
                flat[i] = orig
                fd = (hi - lo) / (2 * step)
                mag = max(abs(fd), abs(float(analytic[i])))
                if mag > 1e-6:
                    assert abs(fd - float(analytic[i])) / mag <= 1e-4


class TestTrain:
    def test_deterministic_given_seed(self, tiny_dataset):
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        cfg = TrainConfig(epochs=3, batch_images=8, batch_pairs=8, seed=11)
        net_a, hist_a = train(tiny_dataset, model_lib.init_model(arch, seed=11), cfg)
        net_b, hist_b = train(tiny_dataset, model_lib.init_model(arch, seed=11), cfg)
        for ea, eb in zip(hist_a.epochs, hist_b.epochs):
            assert ea["recon"] == eb["recon"]
            assert ea["align"] == eb["align"]
            assert ea["total"] == eb["total"]
        for pa, pb in zip(net_a.parameters(), net_b.parameters()):
            assert torch.equal(pa, pb)

    def test_direction_stays_unit_norm(self, tiny_dataset):
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        cfg = TrainConfig(epochs=3, batch_images=8, batch_pairs=8, seed=1)
        net, hist = train(tiny_dataset, model_lib.init_model(arch, seed=1), cfg)
        for entry in hist.epochs:
            assert abs(entry["tau_norm"] - 1.0) <= 1e-6
        assert abs(float(net.age_direction.norm()) - 1.0) <= 1e-6

    def test_zero_weight_ignores_pairs(self, tiny_dataset):
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        cfg = TrainConfig(epochs=2, batch_images=8, batch_pairs=8, seed=2,
                          alignment_weight=0.0)
        net, hist = train(tiny_dataset, model_lib.init_model(arch, seed=2), cfg)
        assert hist.alignment_weight == 0.0
        for entry in hist.epochs:
            assert entry["total"] == entry["recon"]

    def test_auto_weight_matches_counts(self, tiny_dataset):
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        cfg = TrainConfig(epochs=1, batch_images=8, batch_pairs=8, seed=3)
        _, hist = train(tiny_dataset, model_lib.init_model(arch, seed=3), cfg)
        pairs = objective.build_pairs(tiny_dataset.records, 1.0)
        assert hist.alignment_weight == pytest.approx(
            tiny_dataset.n_images / len(pairs))

    def test_no_pairs_raises_when_weight_positive(self):
        cfg_single = synthgen.CohortConfig(n_subjects=4, grid=16, visits_min=1,
                                           visits_max=1)
        ds = data.render_cohort(cfg_single, seed=1)
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        with pytest.raises(NoPairs):
            train(ds, model_lib.init_model(arch, seed=0),
                  TrainConfig(epochs=1, alignment_weight=1.0))

    def test_metrics_csv_written(self, tiny_dataset, tmp_path):
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        cfg = TrainConfig(epochs=2, batch_images=8, batch_pairs=8, seed=4)
        _, hist = train(tiny_dataset, model_lib.init_model(arch, seed=4), cfg,
                        out_dir=tmp_path)
        with open(tmp_path / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "recon", "align", "total", "tau_norm", "wall_seconds"]
        assert len(rows) == 3
        assert (tmp_path / "checkpoint_last.pt").exists()
        assert (tmp_path / "checkpoint_best.pt").exists()
        assert hist.checkpoint_path == str(tmp_path / "checkpoint_last.pt")

    def test_divergence_reports_last_checkpoint(self, tiny_dataset, tmp_path):
        arch = model_lib.ArchConfig(dim=2, grid=16, widths=(4, 8), latent=8)
        # absurd learning rate forces a non-finite loss quickly
        cfg = TrainConfig(epochs=50, batch_images=8, batch_pairs=8, seed=5,
                          learning_rate=1e12)
        with pytest.raises(DivergenceError):
            train(tiny_dataset, model_lib.init_model(arch, seed=5), cfg,
                  out_dir=tmp_path)
