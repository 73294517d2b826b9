"""Convolutional autoencoder with a learnable unit direction in latent space.

The encoder is a stack of conv/ReLU/max-pool blocks followed by one fully
connected layer into a K-dimensional representation; the decoder mirrors
it (fully connected, then upsample/conv/ReLU per pooled level). A unit
vector in representation space, ``age_direction``, is a trainable
parameter kept at unit norm by explicit renormalization after every
optimizer step.

Two preset shapes: the full-scale 3-D configuration (64^3 input, widths
16/32/64/16, 512-D latent) and a 2-D desk-scale configuration (32^2,
widths 8/16/32/8, 32-D latent) with identical block structure.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ArchError, ShapeError


@dataclass(frozen=True)
class ArchConfig:
    dim: int = 2
    grid: int = 32
    widths: tuple[int, ...] = (8, 16, 32, 8)
    latent: int = 32

    def validate(self):
        if self.dim not in (2, 3):
            raise ArchError(f"dim must be 2 or 3, got {self.dim}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ArchError(f"widths must be positive, got {self.widths}")
        if self.latent < 1:
            raise ArchError(f"latent size must be positive, got {self.latent}")
        factor = 2 ** len(self.widths)
        if self.grid % factor != 0 or self.grid // factor < 1:
            raise ArchError(
                f"grid {self.grid} not divisible by 2^{len(self.widths)} pooling stages")

    @property
    def bottleneck_grid(self) -> int:
        return self.grid // 2 ** len(self.widths)

    @property
    def bottleneck_features(self) -> int:
        return self.widths[-1] * self.bottleneck_grid ** self.dim


def paper_scale() -> ArchConfig:
    return ArchConfig(dim=3, grid=64, widths=(16, 32, 64, 16), latent=512)


def desk_scale() -> ArchConfig:
    return ArchConfig(dim=2, grid=32, widths=(8, 16, 32, 8), latent=32)


def _conv(dim):
    return nn.Conv2d if dim == 2 else nn.Conv3d


def _pool(dim):
    return nn.MaxPool2d if dim == 2 else nn.MaxPool3d


class ConvTrunk(nn.Module):
    """Conv/ReLU/max-pool stack shared by the deterministic and VAE encoders."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        conv, pool = _conv(arch.dim), _pool(arch.dim)
        layers = []
        in_ch = 1
        for w in arch.widths:
            layers += [conv(in_ch, w, kernel_size=3, padding=1), nn.ReLU(), pool(2)]
            in_ch = w
        self.blocks = nn.Sequential(*layers)
        self.out_features = arch.bottleneck_features

    def forward(self, x):
        return self.blocks(x).flatten(start_dim=1)


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.trunk = ConvTrunk(arch)
        self.fc = nn.Linear(self.trunk.out_features, arch.latent)

    def forward(self, x):
        return self.fc(self.trunk(x))


class Decoder(nn.Module):
    """Mirror of the encoder: FC to bottleneck grid, then upsample/conv/ReLU."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        conv = _conv(arch.dim)
        self.arch = arch
        self.fc = nn.Linear(arch.latent, arch.bottleneck_features)
        layers = []
        rev = list(arch.widths[::-1])
        for i, w in enumerate(rev):
            out_ch = rev[i + 1] if i + 1 < len(rev) else arch.widths[0]
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       conv(w, out_ch, kernel_size=3, padding=1), nn.ReLU()]
        layers.append(conv(arch.widths[0], 1, kernel_size=3, padding=1))
        self.blocks = nn.Sequential(*layers)

    def forward(self, z):
        g = self.arch.bottleneck_grid
        shape = (-1, self.arch.widths[-1]) + (g,) * self.arch.dim
        return self.blocks(self.fc(z).reshape(shape))


def _check_image_batch(x: torch.Tensor, arch: ArchConfig) -> torch.Tensor:
    spatial = (arch.grid,) * arch.dim
    if x.shape[1:] == spatial:
        x = x.unsqueeze(1)
    if x.shape[1:] != (1,) + spatial:
        raise ShapeError(
            f"expected image batch [B, 1, {', '.join(map(str, spatial))}], got {tuple(x.shape)}")
    return x


class LsslNet(nn.Module):
    """Autoencoder plus the trainable unit direction of progression."""

    def __init__(self, arch: ArchConfig):
        arch.validate()
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)
        self.age_direction = nn.Parameter(torch.zeros(arch.latent))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(_check_image_batch(x, self.arch))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.arch.latent:
            raise ShapeError(f"expected latent size {self.arch.latent}, got {z.shape[-1]}")
        return self.decoder(z)

    @torch.no_grad()
    def renormalize_direction(self):
        self.age_direction.div_(self.age_direction.norm())

    @torch.no_grad()
    def direction_numpy(self) -> np.ndarray:
        return self.age_direction.detach().cpu().numpy().astype(np.float64).copy()

    @torch.no_grad()
    def encode_numpy(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Encode an [N, grid, ...] array to [N, K] without tracking gradients."""
        dtype = next(self.parameters()).dtype
        out = []
        for i in range(0, len(images), batch):
            x = torch.as_tensor(np.asarray(images[i:i + batch]), dtype=dtype)
            out.append(self.encode(x).cpu().numpy())
        return np.concatenate(out, axis=0).astype(np.float64)

    @torch.no_grad()
    def decode_numpy(self, zs: np.ndarray) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        z = torch.as_tensor(np.asarray(zs), dtype=dtype)
        if z.ndim == 1:
            z = z.unsqueeze(0)
        return self.decode(z).squeeze(1).cpu().numpy().astype(np.float64)


class VaeNet(nn.Module):
    """Variational variant: same trunk/decoder, Gaussian posterior heads.

    Downstream consumers treat the posterior mean as the representation.
    """

    def __init__(self, arch: ArchConfig):
        arch.validate()
        super().__init__()
        self.arch = arch
        self.trunk = ConvTrunk(arch)
        self.fc_mean = nn.Linear(self.trunk.out_features, arch.latent)
        self.fc_logvar = nn.Linear(self.trunk.out_features, arch.latent)
        self.decoder = Decoder(arch)

    def encode_distribution(self, x):
        h = self.trunk(_check_image_batch(x, self.arch))
        return self.fc_mean(h), self.fc_logvar(h)

    def encode(self, x):
        return self.encode_distribution(x)[0]

    def decode(self, z):
        if z.shape[-1] != self.arch.latent:
            raise ShapeError(f"expected latent size {self.arch.latent}, got {z.shape[-1]}")
        return self.decoder(z)

    @torch.no_grad()
    def encode_numpy(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        out = []
        for i in range(0, len(images), batch):
            x = torch.as_tensor(np.asarray(images[i:i + batch]), dtype=dtype)
            out.append(self.encode(x).cpu().numpy())
        return np.concatenate(out, axis=0).astype(np.float64)


def reparameterize(mean, logvar, generator=None):
    noise = torch.empty_like(mean).normal_(generator=generator)
    return mean + noise * torch.exp(0.5 * logvar)


def _init_parameters(module: nn.Module, generator: torch.Generator):
    """Fan-in-scaled uniform init, drawn from an explicit generator."""
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d, nn.Conv3d)):
            fan_in = sub.weight.shape[1] * int(np.prod(sub.weight.shape[2:], dtype=np.int64))
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=generator)


def init_model(arch: ArchConfig, seed: int, kind: str = "lssl",
               dtype: torch.dtype = torch.float32):
    """Build and deterministically initialize a model.

    The direction parameter starts as a random unit vector; weights use
    fan-in-scaled uniform init from a generator seeded by ``seed``.
    """
    arch.validate()
    gen = torch.Generator().manual_seed(seed)
    if kind == "lssl":
        model = LsslNet(arch)
    elif kind == "vae":
        model = VaeNet(arch)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    _init_parameters(model, gen)
    if kind == "lssl":
        with torch.no_grad():
            direction = torch.empty(arch.latent).normal_(generator=gen)
            model.age_direction.copy_(direction / direction.norm())
    return model.to(dtype)


CHECKPOINT_FORMAT = "lssl-checkpoint-v1"


def save_checkpoint(path: str | Path, model, step: int = 0,
                    numpy_rng_state: dict | None = None, extra: dict | None = None):
    """Write a self-describing checkpoint (arch, weights, step, RNG state)."""
    kind = "vae" if isinstance(model, VaeNet) else "lssl"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "arch": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in asdict(model.arch).items()},
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "state": model.state_dict(),
        "step": step,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": json.dumps(numpy_rng_state, default=int) if numpy_rng_state else "",
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path):
    """Load a checkpoint; returns (model, metadata dict)."""
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ShapeError(f"{path}: not a recognized checkpoint")
    arch_d = dict(payload["arch"])
    arch_d["widths"] = tuple(arch_d["widths"])
    arch = ArchConfig(**arch_d)
    dtype = getattr(torch, payload["dtype"])
    model = init_model(arch, seed=0, kind=payload["kind"], dtype=dtype)
    model.load_state_dict(payload["state"])
    meta = {"step": payload["step"], "torch_rng": payload["torch_rng"],
            "numpy_rng": payload["numpy_rng"], "extra": payload["extra"],
            "kind": payload["kind"]}
    return model, meta


def clone_model(model):
    return copy.deepcopy(model)
