"""Diagnosis classification on learned representations.

Protocol: subject-level stratified k-fold splits (all images of a subject
share a fold), a cross-sectional MLP head that treats every image as an
independent sample, and a longitudinal GRU head that consumes the ordered
per-subject sequence and predicts from the final hidden state. Heads run
on frozen representations, fine-tuned end-to-end, or from a randomly
initialized encoder. AE / VAE / beta-VAE pretraining baselines share the
autoencoder architecture.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import model as model_lib
from . import trainer as trainer_lib
from .data import DatasetIndex
from .errors import ConfigError, DegenerateLabels, SplitError


def crossval_split(subject_ids: list[str], groups: list[str], k: int,
                   seed: int) -> dict[str, int]:
    """Stratified-by-group round-robin assignment of subjects to k folds.

    The fold counter continues across groups so fold sizes differ by at
    most one subject overall. Deterministic in ``seed``.
    """
    if k < 1:
        raise SplitError(f"k must be >= 1, got {k}")
    if k > len(subject_ids):
        raise SplitError(f"cannot split {len(subject_ids)} subjects into {k} folds")
    if len(set(subject_ids)) != len(subject_ids):
        raise SplitError("subject ids are not unique")
    rng = np.random.Generator(np.random.PCG64(seed))
    assignment: dict[str, int] = {}
    counter = 0
    for group in sorted(set(groups)):
        members = [s for s, g in zip(subject_ids, groups) if g == group]
        order = rng.permutation(len(members))
        for pos in order:
            assignment[members[pos]] = counter % k
            counter += 1
    return assignment


def _state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def extract_representations(net, dataset: DatasetIndex,
                            cache_dir: str | Path | None = None,
                            checkpoint_hash: str | None = None) -> np.ndarray:
    """Encode every image once, optionally caching to disk.

    The cache key is the checkpoint hash (falling back to a hash of the
    live weights); a stale cache is recomputed, never trusted.
    """
    key = checkpoint_hash or _state_hash(net)
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"reps_{key[:16]}.npz"
        if cache_path.exists():
            blob = np.load(cache_path, allow_pickle=False)
            if str(blob["key"]) == key and blob["reps"].shape[0] == dataset.n_images:
                return blob["reps"]
    reps = net.encode_numpy(dataset.images)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache_path, key=np.str_(key), reps=reps)
    return reps


@dataclass
class ClassifierConfig:
    head: str = "mlp"            # "mlp" | "gru"
    mode: str = "frozen"         # "frozen" | "fine_tune" | "no_pretrain"
    epochs: int = 250
    learning_rate: float = 3e-3
    batch_size: int = 16
    seed: int = 0
    gru_input: int = 16
    gru_hidden: int = 16
    mlp_hidden2: int = 64

    def validate(self):
        if self.head not in ("mlp", "gru"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.mode not in ("frozen", "fine_tune", "no_pretrain"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs/batch_size/learning_rate must be positive")


@dataclass
class EvalResult:
    per_fold_accuracy: list[float]
    mean_accuracy: float
    curves: list[tuple[int, int, float]] = field(default_factory=list)  # (fold, epoch, acc)


class MlpHead(nn.Module):
    """Two fully connected ReLU layers (latent-sized, then 64) and a logit layer."""

    def __init__(self, latent: int, hidden2: int = 64, classes: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent, latent), nn.ReLU(),
            nn.Linear(latent, hidden2), nn.ReLU(),
            nn.Linear(hidden2, classes),
        )

    def forward(self, x):
        return self.net(x)


class GruHead(nn.Module):
    """Project to a small vector, run one GRU layer, classify the final state."""

    def __init__(self, latent: int, proj: int = 16, hidden: int = 16, classes: int = 2):
        super().__init__()
        self.proj = nn.Linear(latent, proj)
        self.gru = nn.GRU(proj, hidden, num_layers=1, batch_first=True)
        self.out = nn.Linear(hidden, classes)

    def forward(self, sequence):
        # sequence: [T, latent] for one subject, any T >= 1
        x = self.proj(sequence).unsqueeze(0)
        _, h = self.gru(x)
        return self.out(h[-1, 0])

    def forward_batch(self, sequences: torch.Tensor):
        # sequences: [B, T, latent], equal lengths
        _, h = self.gru(self.proj(sequences))
        return self.out(h[-1])


def _gru_logits_bucketed(head: GruHead, reps: torch.Tensor, visit_idx: dict,
                         subjects: np.ndarray) -> torch.Tensor:
    """Per-subject logits; subjects are bucketed by sequence length so the
    recurrent forward runs batched (identical math to one-by-one)."""
    buckets: dict[int, list[int]] = {}
    for pos, s in enumerate(subjects):
        buckets.setdefault(len(visit_idx[s]), []).append(pos)
    logits = reps.new_zeros((len(subjects), 2))
    for length, positions in buckets.items():
        stacked = torch.stack([reps[visit_idx[subjects[p]]] for p in positions])
        logits[positions] = head.forward_batch(stacked)
    return logits


def _init_head(head: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for sub in head.modules():
        if isinstance(sub, nn.Linear):
            fan_in = sub.weight.shape[1]
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=gen)
                sub.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(sub, nn.GRU):
            for name, param in sub.named_parameters():
                bound = 1.0 / float(np.sqrt(sub.hidden_size))
                with torch.no_grad():
                    param.uniform_(-bound, bound, generator=gen)
    return head


def _check_two_classes(labels: np.ndarray):
    if len(np.unique(labels)) < 2:
        raise DegenerateLabels("training fold contains a single class")


def train_classifier(config: ClassifierConfig, folds: dict[str, int],
                     dataset: DatasetIndex, net=None,
                     representations: np.ndarray | None = None) -> EvalResult:
    """Run the full k-fold protocol for one (head, mode) setting.

    Frozen mode consumes cached representations and never touches the
    encoder (asserted by weight hash). Fine-tune clones the pretrained
    encoder per fold; no_pretrain draws a fresh random encoder per fold.
    Per-epoch held-out accuracy is recorded for convergence curves.
    """
    config.validate()
    k = max(folds.values()) + 1
    labels = dataset.image_labels()
    subject_labels = np.array([1 if g == "diseased" else 0 for g in dataset.groups])

    if config.mode == "frozen":
        if representations is None:
            if net is None:
                raise ConfigError("frozen mode needs representations or an encoder")
            representations = extract_representations(net, dataset)
        encoder_hash_before = _state_hash(net) if net is not None else None
    latent = (representations.shape[1] if representations is not None
              else net.arch.latent)

    per_fold = []
    curves = []
    for fold in range(k):
        torch.manual_seed(config.seed * 1000 + fold)  # GRU/encoder dropout-free; seed for safety
        test_subjects = {s for s, f in folds.items() if f == fold}
        train_mask_subj = np.array([sid not in test_subjects for sid in dataset.subject_ids])
        _check_two_classes(subject_labels[train_mask_subj])

        if config.mode == "frozen":
            acc_curve = _run_frozen_fold(config, dataset, representations, labels,
                                         subject_labels, train_mask_subj, fold)
        else:
            acc_curve = _run_encoder_fold(config, dataset, labels, subject_labels,
                                          train_mask_subj, fold, net, latent)
        per_fold.append(acc_curve[-1])
        curves.extend((fold, e + 1, a) for e, a in enumerate(acc_curve))

    if config.mode == "frozen" and net is not None:
        if _state_hash(net) != encoder_hash_before:
            raise AssertionError("frozen-mode encoder weights changed")
    return EvalResult(per_fold_accuracy=per_fold,
                      mean_accuracy=float(np.mean(per_fold)), curves=curves)


def _subject_batches(indices: np.ndarray, rng: np.random.Generator, batch: int):
    order = rng.permutation(len(indices))
    for i in range(0, len(order), batch):
        yield indices[order[i:i + batch]]


def _run_frozen_fold(config, dataset, reps, labels, subject_labels,
                     train_mask_subj, fold) -> list[float]:
    reps_t = torch.as_tensor(reps, dtype=torch.float32)
    rng = np.random.Generator(np.random.PCG64([config.seed, fold]))
    head = _build_head(config, reps.shape[1], fold)
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()

    if config.head == "mlp":
        train_imgs = np.flatnonzero(train_mask_subj[dataset.subject_of])
        test_imgs = np.flatnonzero(~train_mask_subj[dataset.subject_of])
        y = torch.as_tensor(labels, dtype=torch.long)
        curve = []
        for _ in range(config.epochs):
            for batch in _subject_batches(train_imgs, rng, config.batch_size):
                opt.zero_grad()
                loss = loss_fn(head(reps_t[batch]), y[batch])
                loss.backward()
                opt.step()
            with torch.no_grad():
                pred = head(reps_t[test_imgs]).argmax(dim=1).numpy()
            curve.append(float((pred == labels[test_imgs]).mean()))
        return curve

    train_subj = np.flatnonzero(train_mask_subj)
    test_subj = np.flatnonzero(~train_mask_subj)
    visit_idx = {s: dataset.visits_of(s) for s in range(dataset.n_subjects)}
    y = torch.as_tensor(subject_labels, dtype=torch.long)
    curve = []
    for _ in range(config.epochs):
        for batch in _subject_batches(train_subj, rng, config.batch_size):
            opt.zero_grad()
            logits = _gru_logits_bucketed(head, reps_t, visit_idx, batch)
            loss = loss_fn(logits, y[batch])
            loss.backward()
            opt.step()
        with torch.no_grad():
            pred = _gru_logits_bucketed(head, reps_t, visit_idx, test_subj).argmax(dim=1).numpy()
        curve.append(float((pred == subject_labels[test_subj]).mean()))
    return curve


def _run_encoder_fold(config, dataset, labels, subject_labels, train_mask_subj,
                      fold, net, latent) -> list[float]:
    if config.mode == "fine_tune":
        if net is None:
            raise ConfigError("fine_tune mode needs a pretrained encoder")
        encoder = model_lib.clone_model(net)
    else:
        encoder = model_lib.init_model(net.arch if net is not None else model_lib.desk_scale(),
                                       seed=config.seed * 7919 + fold)
    head = _build_head(config, latent, fold)
    params = list(encoder.encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.Generator(np.random.PCG64([config.seed, fold]))
    images = torch.as_tensor(dataset.images, dtype=torch.float32).unsqueeze(1)

    if config.head == "mlp":
        train_imgs = np.flatnonzero(train_mask_subj[dataset.subject_of])
        test_imgs = np.flatnonzero(~train_mask_subj[dataset.subject_of])
        y = torch.as_tensor(labels, dtype=torch.long)
        curve = []
        for _ in range(config.epochs):
            for batch in _subject_batches(train_imgs, rng, config.batch_size):
                opt.zero_grad()
                loss = loss_fn(head(encoder.encode(images[batch])), y[batch])
                loss.backward()
                opt.step()
            with torch.no_grad():
                pred = head(encoder.encode(images[test_imgs])).argmax(dim=1).numpy()
            curve.append(float((pred == labels[test_imgs]).mean()))
        return curve

    train_subj = np.flatnonzero(train_mask_subj)
    test_subj = np.flatnonzero(~train_mask_subj)
    visit_idx = {s: dataset.visits_of(s) for s in range(dataset.n_subjects)}
    y = torch.as_tensor(subject_labels, dtype=torch.long)
    curve = []
    for _ in range(config.epochs):
        for batch in _subject_batches(train_subj, rng, min(config.batch_size, 16)):
            opt.zero_grad()
            logits = torch.stack([head(encoder.encode(images[visit_idx[s]])) for s in batch])
            loss = loss_fn(logits, y[batch])
            loss.backward()
            opt.step()
        with torch.no_grad():
            pred = np.array([int(head(encoder.encode(images[visit_idx[s]])).argmax())
                             for s in test_subj])
        curve.append(float((pred == subject_labels[test_subj]).mean()))
    return curve


def _build_head(config: ClassifierConfig, latent: int, fold: int) -> nn.Module:
    if config.head == "mlp":
        head = MlpHead(latent, hidden2=config.mlp_hidden2)
    else:
        head = GruHead(latent, proj=config.gru_input, hidden=config.gru_hidden)
    return _init_head(head, seed=config.seed * 100003 + fold)


def vae_loss(net: model_lib.VaeNet, images: torch.Tensor, beta: float,
             generator: torch.Generator | None = None):
    """Reconstruction (pixel sum, batch mean) plus beta-weighted Gaussian KL."""
    mean, logvar = net.encode_distribution(images)
    z = model_lib.reparameterize(mean, logvar, generator)
    recon = net.decode(z)
    target = images if images.ndim == recon.ndim else images.unsqueeze(1)
    rec = ((target - recon) ** 2).flatten(start_dim=1).sum(dim=1).mean()
    kl = (-0.5 * (1.0 + logvar - mean ** 2 - logvar.exp())).sum(dim=1).mean()
    return rec + beta * kl, float(rec), float(kl)


def baseline_pretrain(kind: str, dataset: DatasetIndex, arch,
                      train_config: trainer_lib.TrainConfig,
                      beta: float = 4.0, out_dir=None):
    """Pretrain a baseline encoder of the shared architecture.

    ``ae`` is exactly the main trainer at alignment weight zero;
    ``vae``/``beta_vae`` optimize the reparameterized Gaussian bound
    (``vae`` is ``beta_vae`` at beta = 1).
    """
    if kind == "ae":
        net = model_lib.init_model(arch, seed=train_config.seed, kind="lssl")
        cfg = trainer_lib.TrainConfig(**{**train_config.__dict__, "alignment_weight": 0.0})
        net, history = trainer_lib.train(dataset, net, cfg, out_dir=out_dir)
        return net, history
    if kind not in ("vae", "beta_vae"):
        raise ConfigError(f"unknown baseline kind {kind!r}")
    if kind == "vae":
        beta = 1.0
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    torch.set_num_threads(max(1, train_config.threads))
    net = model_lib.init_model(arch, seed=train_config.seed, kind="vae")
    opt = torch.optim.Adam(net.parameters(), lr=train_config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(train_config.seed))
    gen = torch.Generator().manual_seed(train_config.seed)
    images = torch.as_tensor(dataset.images, dtype=torch.float32).unsqueeze(1)
    steps = int(np.ceil(dataset.n_images / train_config.batch_images))
    history = []
    for epoch in range(train_config.epochs):
        tot = 0.0
        for _ in range(steps):
            batch = images[trainer_lib._sample(rng, dataset.n_images, train_config.batch_images)]
            loss, rec, kl = vae_loss(net, batch, beta, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss)
        history.append({"epoch": epoch + 1, "loss": tot / steps})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model_lib.save_checkpoint(out_dir / "checkpoint_last.pt", net,
                                  step=train_config.epochs * steps,
                                  extra={"kind": kind, "beta": beta})
    return net, history


SETTING_OF_HEAD = {"mlp": "cross_sectional", "gru": "longitudinal"}
EVAL_COLUMNS = ["method", "mode", "setting", "seed", "fold", "epoch", "accuracy"]


def run_classification_protocol(dataset: DatasetIndex, lssl_net, arch,
                                pretrain_config, methods, heads, modes, seeds,
                                k_folds: int = 5, split_seed: int = 17,
                                classifier_epochs: int = 30,
                                classifier_lr: float = 1e-3,
                                classifier_batch: int = 64, beta: float = 4.0,
                                out_dir=None, cache_dir=None):
    """Run every (method, head, mode, seed) cell of the evaluation grid.

    Returns (rows, summary): rows follow EVAL_COLUMNS; summary maps
    "method/head/mode" to per-seed fold accuracies and the grand mean.
    Baseline encoders are pretrained here (deterministic in the
    pretraining seed), so the whole grid is reproducible from one call.
    """
    folds = crossval_split(dataset.subject_ids, dataset.groups, k_folds, split_seed)
    encoders = {}
    for method in methods:
        if method == "lssl":
            if lssl_net is None:
                raise ConfigError("classification grid includes 'lssl' but no trained model given")
            encoders[method] = lssl_net
        else:
            sub_dir = None if out_dir is None else Path(out_dir) / f"pretrain_{method}"
            encoders[method], _ = baseline_pretrain(method, dataset, arch, pretrain_config,
                                                    beta=beta, out_dir=sub_dir)
    rows = []
    summary = {}
    for method in methods:
        net = encoders[method]
        reps = extract_representations(net, dataset, cache_dir=cache_dir)
        for head in heads:
            for mode in modes:
                per_seed = []
                for seed in seeds:
                    cfg = ClassifierConfig(head=head, mode=mode, epochs=classifier_epochs,
                                           learning_rate=classifier_lr,
                                           batch_size=classifier_batch, seed=seed)
                    result = train_classifier(cfg, folds, dataset, net=net,
                                              representations=reps if mode == "frozen" else None)
                    per_seed.append(result.per_fold_accuracy)
                    rows.extend([method, mode, SETTING_OF_HEAD[head], seed, fold, epoch, acc]
                                for fold, epoch, acc in result.curves)
                flat = [a for fold_accs in per_seed for a in fold_accs]
                summary[f"{method}/{head}/{mode}"] = {
                    "per_seed_fold_accuracy": per_seed,
                    "mean_accuracy": float(np.mean(flat)),
                }
    return rows, summary


def write_eval_outputs(rows, summary, out_dir) -> None:
    import csv
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow([row[0], row[1], row[2], row[3], row[4], row[5], repr(row[6])])
    (out_dir / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
