"""Training loop for the composite objective, plus gradient verification.

Every optimizer step co-samples an image batch (reconstruction term) and a
pair batch (alignment term) independently and uniformly, then projects the
direction parameter back to the unit sphere. Runs are bit-deterministic
for a fixed (dataset, seed, config) in single-threaded mode.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import model as model_lib
from . import objective
from .data import DatasetIndex
from .errors import DivergenceError, NoPairs

METRIC_COLUMNS = ["epoch", "recon", "align", "total", "tau_norm", "wall_seconds"]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_images: int = 64
    batch_pairs: int = 64
    learning_rate: float = 1e-3
    alignment_weight: float | str = "auto"   # numeric, or "auto" for |images|/|pairs|
    seed: int = 17
    min_gap_years: float = 1.0
    eval_every: int = 1
    threads: int = 1
    verbose: bool = False

    def validate(self):
        if self.epochs < 1 or self.batch_images < 1 or self.batch_pairs < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.alignment_weight != "auto" and float(self.alignment_weight) < 0:
            raise ValueError("alignment weight must be >= 0 or 'auto'")


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint_path: str | None = None
    best_checkpoint_path: str | None = None
    alignment_weight: float = 0.0
    n_images: int = 0
    n_pairs: int = 0


def _sample(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if size >= n:
        return rng.permutation(n) if size == n else rng.choice(n, size=size, replace=True)
    return rng.choice(n, size=size, replace=False)


def train(dataset: DatasetIndex, net, config: TrainConfig,
          out_dir: str | Path | None = None):
    """Optimize encoder, decoder, and direction on one dataset.

    Returns (net, TrainHistory). If ``out_dir`` is given, writes a
    metrics CSV plus end-of-epoch and best-alignment checkpoints there.
    A non-finite loss aborts with the last finite checkpoint attached.
    """
    config.validate()
    torch.set_num_threads(max(1, config.threads))
    pairs = objective.build_pairs(dataset.records, config.min_gap_years)
    if config.alignment_weight == "auto":
        weight = objective.lambda_default(dataset.n_images, len(pairs))
    else:
        weight = float(config.alignment_weight)
        if weight > 0 and not pairs:
            raise NoPairs("alignment weight > 0 but the manifest yields no pairs")

    dtype = next(net.parameters()).dtype
    images = torch.as_tensor(dataset.images, dtype=dtype).unsqueeze(1)
    if pairs:
        earlier_idx = np.array([dataset.image_index_by_path[p.earlier_ref] for p in pairs])
        later_idx = np.array([dataset.image_index_by_path[p.later_ref] for p in pairs])

    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    steps_per_epoch = math.ceil(dataset.n_images / config.batch_images)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_file)
        writer.writerow(METRIC_COLUMNS)

    history = TrainHistory(alignment_weight=weight, n_images=dataset.n_images,
                           n_pairs=len(pairs))
    best_align = -math.inf
    last_checkpoint = None
    start = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            sums = {"recon": 0.0, "align": 0.0, "total": 0.0}
            for _ in range(steps_per_epoch):
                img_batch = images[_sample(rng, dataset.n_images, config.batch_images)]
                if pairs:
                    sel = _sample(rng, len(pairs), min(config.batch_pairs, len(pairs)))
                    pair_e = images[earlier_idx[sel]]
                    pair_l = images[later_idx[sel]]
                else:
                    pair_e = pair_l = None
                breakdown = objective.total_loss(img_batch, pair_e, pair_l, net, weight)
                if not torch.isfinite(breakdown.total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}", last_checkpoint=last_checkpoint)
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                net.renormalize_direction()
                b = breakdown.floats()
                sums["recon"] += b.recon
                sums["align"] += b.align
                sums["total"] += b.total
            direction_norm = float(net.age_direction.detach().norm())
            entry = {
                "epoch": epoch,
                "recon": sums["recon"] / steps_per_epoch,
                "align": sums["align"] / steps_per_epoch,
                "total": sums["total"] / steps_per_epoch,
                "tau_norm": direction_norm,
                "wall_seconds": time.perf_counter() - epoch_start,
            }
            history.epochs.append(entry)
            if writer is not None:
                writer.writerow([entry["epoch"]] + [repr(entry[c]) for c in METRIC_COLUMNS[1:]])
                metrics_file.flush()
            if out_dir is not None:
                last_checkpoint = str(out_dir / "checkpoint_last.pt")
                model_lib.save_checkpoint(last_checkpoint, net, step=epoch * steps_per_epoch,
                                          extra={"epoch": epoch, "alignment_weight": weight})
                if entry["align"] > best_align:
                    best_align = entry["align"]
                    history.best_checkpoint_path = str(out_dir / "checkpoint_best.pt")
                    model_lib.save_checkpoint(history.best_checkpoint_path, net,
                                              step=epoch * steps_per_epoch,
                                              extra={"epoch": epoch, "alignment_weight": weight})
            if config.verbose:
                print(f"epoch {epoch:3d}  recon {entry['recon']:.5f}  "
                      f"align {entry['align']:+.4f}  total {entry['total']:+.5f}")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    history.wall_seconds = time.perf_counter() - start
    history.checkpoint_path = last_checkpoint
    return net, history


@dataclass
class GradCheckGroup:
    name: str
    max_rel_err: float
    max_abs_err_small: float
    n_checked: int


@dataclass
class GradCheckReport:
    groups: list[GradCheckGroup]
    tolerance: float
    step: float
    passed: bool

    def worst(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=0.0)


def _group_of(param_name: str) -> str:
    if param_name.startswith("encoder") or param_name.startswith("trunk") \
            or param_name.startswith("fc_"):
        return "encoder"
    if param_name.startswith("decoder"):
        return "decoder"
    return "direction"


def gradient_check(net, loss_fn, tolerance: float = 1e-4, step: float = 1e-4,
                   magnitude_floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be a deterministic closure over fixed data evaluating
    the loss from the model's current parameters. Relative error is taken
    elementwise over entries whose analytic or numeric gradient exceeds
    ``magnitude_floor``; failures are reported, never raised. Intended for
    micro models in float64.
    """
    net.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for name, p in net.named_parameters()}

    stats: dict[str, list[float]] = {}
    counts: dict[str, int] = {}
    with torch.no_grad():
        for name, p in net.named_parameters():
            flat = p.data.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                fd[i] = (hi - lo) / (2.0 * step)
            a = analytic[name].view(-1)
            group = _group_of(name)
            rel_max, abs_small = stats.setdefault(group, [0.0, 0.0])
            for i in range(flat.numel()):
                mag = max(abs(float(a[i])), abs(float(fd[i])))
                if mag > magnitude_floor:
                    rel_max = max(rel_max, abs(float(a[i]) - float(fd[i])) / mag)
                else:
                    abs_small = max(abs_small, abs(float(a[i]) - float(fd[i])))
            stats[group] = [rel_max, abs_small]
            counts[group] = counts.get(group, 0) + flat.numel()

    groups = [GradCheckGroup(name=g, max_rel_err=v[0], max_abs_err_small=v[1],
                             n_checked=counts[g]) for g, v in sorted(stats.items())]
    passed = all(g.max_rel_err <= tolerance for g in groups)
    return GradCheckReport(groups=groups, tolerance=tolerance, step=step, passed=passed)


def gradient_check_total_loss(net, images: np.ndarray, earlier: np.ndarray | None,
                              later: np.ndarray | None, weight: float,
                              tolerance: float = 1e-4, step: float = 1e-4) -> GradCheckReport:
    """Gradient check of the full objective on a micro batch (run in float64)."""
    net64 = model_lib.clone_model(net).double()
    imgs = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    pe = torch.as_tensor(np.asarray(earlier), dtype=torch.float64) if earlier is not None else None
    pl = torch.as_tensor(np.asarray(later), dtype=torch.float64) if later is not None else None

    def loss_fn():
        return objective.total_loss(imgs, pe, pl, net64, weight).total

    return gradient_check(net64, loss_fn, tolerance=tolerance, step=step)


@torch.no_grad()
def kink_margins(net, *image_batches) -> tuple[float, float]:
    """Distance of the evaluation point from ReLU and max-pool kinks.

    Returns (min |pre-activation|, min pool winner/runner-up gap) over all
    conv outputs reached by the given batches. Finite differences are only
    a valid oracle when both margins comfortably exceed the step times the
    parameter influence; 2-D models only.
    """
    if net.arch.dim != 2:
        raise ValueError("kink margin diagnostic supports 2-D models only")
    min_relu = float("inf")
    min_pool = float("inf")

    def pool_gap(t: torch.Tensor) -> float:
        b, c, h, w = t.shape
        blocks = t.reshape(b, c, h // 2, 2, w // 2, 2).permute(0, 1, 2, 4, 3, 5)
        top2 = blocks.reshape(b, c, h // 2, w // 2, 4).topk(2, dim=-1).values
        return float((top2[..., 0] - top2[..., 1]).min())

    for x in image_batches:
        if x is None or x.shape[0] == 0:
            continue
        h = x.unsqueeze(1) if x.ndim == 3 else x
        h = h.to(next(net.parameters()).dtype)
        for layer in net.encoder.trunk.blocks:
            if isinstance(layer, torch.nn.MaxPool2d):
                min_pool = min(min_pool, pool_gap(h))
            h = layer(h)
            if isinstance(layer, torch.nn.Conv2d):
                min_relu = min(min_relu, float(h.abs().min()))
        z = net.encoder.fc(h.flatten(start_dim=1))
        g = net.decoder.fc(z).reshape(
            (-1, net.arch.widths[-1]) + (net.arch.bottleneck_grid,) * 2)
        for layer in net.decoder.blocks:
            g = layer(g)
            if isinstance(layer, torch.nn.Conv2d):
                min_relu = min(min_relu, float(g.abs().min()))
    return min_relu, min_pool
