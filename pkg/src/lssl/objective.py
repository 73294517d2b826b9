"""Composite training objective: reconstruction minus weighted alignment.

The loss couples a plain autoencoding term over all images with a cosine
term over ordered within-subject image pairs: for a pair scanned at an
earlier and a later time, the representation difference (later - earlier)
should point along the shared unit direction. Both terms are batch means,
so the default weight |images| / |pairs| keeps their balance independent
of minibatch sizes; with that weight, full-batch minimizers coincide with
the summed form up to a positive constant per term.

Pairs are ordered earlier -> later only. Reversal augmentation would flip
the cosine's sign and destroy the direction's orientation (later = older).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np
import torch

from .errors import EmptyBatch, EmptyDataset, NoPairs, ShapeError

DEGENERATE_EPS = 1e-8


@dataclass
class TrainingPair:
    subject_id: str
    earlier_time: float
    later_time: float
    earlier_ref: str
    later_ref: str


@dataclass
class LossBreakdown:
    recon: object       # scalar (torch tensor during training, float after .floats())
    align: object       # mean cosine over the pair batch, in [-1, 1]
    total: object       # recon - weight * align
    n_images: int
    n_pairs: int
    n_degenerate: int = 0

    def floats(self) -> "LossBreakdown":
        def scalar(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return replace(self, recon=scalar(self.recon), align=scalar(self.align),
                       total=scalar(self.total))


def build_pairs(records, min_gap_years: float) -> list[TrainingPair]:
    """All ordered within-subject visit pairs separated by at least the gap.

    Subjects with a single usable visit contribute no pairs; their images
    still participate in the reconstruction term.
    """
    if min_gap_years <= 0:
        raise ValueError(f"min_gap_years must be > 0, got {min_gap_years}")
    records = list(records)
    if not records:
        raise EmptyDataset("cannot build pairs from an empty manifest")
    by_subject: dict[str, list] = {}
    for rec in records:
        by_subject.setdefault(rec.subject_id, []).append(rec)
    pairs = []
    for subject_id, visits in by_subject.items():
        visits = sorted(visits, key=lambda r: r.time_years)
        for a, b in combinations(visits, 2):
            if b.time_years - a.time_years >= min_gap_years:
                pairs.append(TrainingPair(
                    subject_id=subject_id,
                    earlier_time=a.time_years, later_time=b.time_years,
                    earlier_ref=a.image_path, later_ref=b.image_path))
    return pairs


def lambda_default(n_images: int, n_pairs: int) -> float:
    """Balance weight: number of images over number of pairs."""
    if n_pairs <= 0:
        raise NoPairs(f"no usable pairs ({n_pairs}); supply an explicit weight or abort")
    return n_images / n_pairs


def cosine_alignment(z_later, z_earlier, direction, eps: float = DEGENERATE_EPS) -> float:
    """Cosine between the representation change and the unit direction.

    Degenerate pairs (difference norm below ``eps``) contribute 0; the
    cosine is undefined there.
    """
    d_later = np.asarray(z_later, dtype=np.float64)
    d_earlier = np.asarray(z_earlier, dtype=np.float64)
    d_dir = np.asarray(direction, dtype=np.float64)
    delta = d_later - d_earlier
    norm = float(np.linalg.norm(delta))
    if norm < eps:
        return 0.0
    return float(np.dot(delta, d_dir) / norm)


def pair_cosines(z_later: torch.Tensor, z_earlier: torch.Tensor,
                 direction: torch.Tensor, eps: float = DEGENERATE_EPS):
    """Differentiable per-pair cosines; returns (cosines, degenerate count).

    Degenerate pairs are zeroed out but stay in the batch, so the mean
    over the returned tensor matches the documented convention.
    """
    delta = z_later - z_earlier
    norm = delta.norm(dim=-1)
    cos = (delta * direction).sum(dim=-1) / norm.clamp(min=eps)
    degenerate = norm < eps
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    return cos, int(degenerate.sum())


def reconstruction_loss(image, reconstruction):
    """Mean of squared pixel differences."""
    if isinstance(image, torch.Tensor) or isinstance(reconstruction, torch.Tensor):
        if image.shape != reconstruction.shape:
            raise ShapeError(f"shape mismatch {tuple(image.shape)} vs {tuple(reconstruction.shape)}")
        return ((image - reconstruction) ** 2).mean()
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


def total_loss(images: torch.Tensor, pair_earlier: torch.Tensor | None,
               pair_later: torch.Tensor | None, model,
               weight: float) -> LossBreakdown:
    """Batch objective: mean reconstruction MSE minus weight * mean cosine.

    ``images`` is the reconstruction batch; ``pair_earlier``/``pair_later``
    hold the pair batch (may be None/empty when the weight is zero).
    Gradients flow into encoder, decoder, and the direction.
    """
    if weight < 0:
        raise ValueError(f"alignment weight must be >= 0, got {weight}")
    if images is None or images.shape[0] == 0:
        raise EmptyBatch("reconstruction batch is empty")
    z = model.encode(images)
    recon = reconstruction_loss(_as_channel(images, model), model.decode(z))
    n_pairs = 0 if pair_earlier is None else pair_earlier.shape[0]
    n_degenerate = 0
    if n_pairs > 0:
        z_earlier = model.encode(pair_earlier)
        z_later = model.encode(pair_later)
        cos, n_degenerate = pair_cosines(z_later, z_earlier, model.age_direction)
        align = cos.mean()
    else:
        align = torch.zeros((), dtype=recon.dtype)
    total = recon - weight * align
    return LossBreakdown(recon=recon, align=align, total=total,
                         n_images=int(images.shape[0]), n_pairs=int(n_pairs),
                         n_degenerate=n_degenerate)


def _as_channel(images: torch.Tensor, model) -> torch.Tensor:
    spatial = (model.arch.grid,) * model.arch.dim
    if images.shape[1:] == spatial:
        return images.unsqueeze(1)
    return images
