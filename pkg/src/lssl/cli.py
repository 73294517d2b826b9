"""Command-line surface: generate | train | analyze | verify | classify | plot.

Each command reads one JSON config, consumes upstream artifacts from the
shared output root, writes its own artifacts plus a run-metadata file
(resolved config, config hash, seed, versions, wall time), and exits 0 on
success, 2 when an upstream artifact is missing, 1 on any other error.
The environment variable LSSL_SEED overrides the config seed.
"""

from __future__ import annotations

import json
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from . import analysis as analysis_lib
from . import config as config_lib
from . import data as data_lib
from . import downstream as downstream_lib
from . import model as model_lib
from . import plots as plots_lib
from . import synthgen
from . import trainer as trainer_lib
from . import verify as verify_lib
from .errors import LsslError

MISSING_ARTIFACT_EXIT = 2


class MissingArtifact(LsslError):
    pass


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact: {path} (run `lssl {hint}` first)")
    return path


def _write_run_meta(out_dir: Path, command: str, cfg, started: float,
                    outputs: list[str], extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "config_hash": config_lib.config_hash(cfg),
        "resolved_config": config_lib.to_dict(cfg),
        "seed": cfg.seed,
        "versions": {
            "lssl": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "wall_seconds": time.perf_counter() - started,
        "outputs": outputs,
    }
    if extra:
        meta["extra"] = extra
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _run_command(command: str, fn) -> None:
    try:
        fn()
    except MissingArtifact as exc:
        click.echo(f"lssl {command}: {exc}", err=True)
        sys.exit(MISSING_ARTIFACT_EXIT)
    except LsslError as exc:
        click.echo(f"lssl {command}: {exc}", err=True)
        sys.exit(1)
    except OSError as exc:
        click.echo(f"lssl {command}: {exc}", err=True)
        sys.exit(1)


@click.group()
@click.version_option(version=__version__)
def main():
    """Longitudinal self-supervised representation learning pipeline."""


_config_opt = click.option("--config", "config_path", required=True,
                           type=click.Path(exists=True, dir_okay=False),
                           help="Path to the JSON run config.")
_out_opt = click.option("--out", "out_root", default="lssl_out", show_default=True,
                        type=click.Path(file_okay=False),
                        help="Shared output root for all pipeline stages.")


@main.command()
@_config_opt
@_out_opt
def generate(config_path, out_root):
    """Render the synthetic longitudinal dataset and its manifest."""
    def run():
        started = time.perf_counter()
        cfg = config_lib.load_config(config_path)
        out_dir = Path(out_root) / "dataset"
        manifest = synthgen.generate_dataset(config_lib.cohort_config(cfg), out_dir,
                                             seed=cfg.seed)
        n_control = sum(1 for s in manifest.subjects if s.group == "control")
        click.echo(f"wrote {manifest.n_images} images for {len(manifest.subjects)} subjects "
                   f"({n_control} control / {len(manifest.subjects) - n_control} diseased) "
                   f"to {out_dir}")
        _write_run_meta(out_dir, "generate", cfg, started,
                        ["manifest.jsonl", "generator_config.json", "images/"])
    _run_command("generate", run)


@main.command()
@_config_opt
@_out_opt
def train(config_path, out_root):
    """Train the model on the generated dataset."""
    def run():
        started = time.perf_counter()
        cfg = config_lib.load_config(config_path)
        root = Path(out_root)
        _require(root / "dataset" / "manifest.jsonl", "generate")
        dataset = data_lib.load_dataset(root / "dataset")
        net = model_lib.init_model(config_lib.arch_config(cfg), seed=cfg.seed)
        out_dir = root / "train"
        net, history = trainer_lib.train(dataset, net, config_lib.train_config(cfg),
                                         out_dir=out_dir)
        last = history.epochs[-1]
        click.echo(f"trained {len(history.epochs)} epochs on {history.n_images} images / "
                   f"{history.n_pairs} pairs (weight {history.alignment_weight:.4f}); "
                   f"final recon {last['recon']:.5f}, alignment {last['align']:+.4f}")
        _write_run_meta(out_dir, "train", cfg, started,
                        ["metrics.csv", "checkpoint_last.pt", "checkpoint_best.pt"],
                        extra={"n_images": history.n_images, "n_pairs": history.n_pairs,
                               "alignment_weight": history.alignment_weight})
    _run_command("train", run)


@main.command()
@_config_opt
@_out_opt
def analyze(config_path, out_root):
    """Brain-age analysis: projections, slopes, group tests, traversal."""
    def run():
        started = time.perf_counter()
        cfg = config_lib.load_config(config_path)
        root = Path(out_root)
        _require(root / "dataset" / "manifest.jsonl", "generate")
        ckpt = _require(root / "train" / "checkpoint_last.pt", "train")
        dataset = data_lib.load_dataset(root / "dataset")
        net, _ = model_lib.load_checkpoint(ckpt)
        a = cfg.analysis
        result = analysis_lib.run_analysis(
            dataset, net, normalize_population=a.normalize_population,
            traversal_points=a.traversal_points,
            traversal_percentiles=tuple(a.traversal_percentiles),
            dark_threshold=a.dark_threshold, dark_radius=a.dark_radius)
        out_dir = root / "analysis"
        analysis_lib.write_analysis_outputs(result, out_dir)
        if result.welch:
            click.echo(f"slope ratio {result.slope_ratio:.3f}, "
                       f"welch p {result.welch['p']:.3g}")
        if result.decoder_constant:
            click.echo("warning: decoder output is constant across the traversal", err=True)
        _write_run_meta(out_dir, "analyze", cfg, started,
                        ["analysis.json", "analysis.csv", "traversal_*.ten"])
    _run_command("analyze", run)


@main.command()
@_config_opt
@_out_opt
def verify(config_path, out_root):
    """Disentanglement report: colinearity, perturbation ratios, correlations."""
    def run():
        started = time.perf_counter()
        cfg = config_lib.load_config(config_path)
        root = Path(out_root)
        _require(root / "dataset" / "manifest.jsonl", "generate")
        ckpt = _require(root / "train" / "checkpoint_last.pt", "train")
        dataset = data_lib.load_dataset(root / "dataset")
        net, _ = model_lib.load_checkpoint(ckpt)
        v = cfg.verify
        report = verify_lib.run_verify(
            dataset, net, config_lib.cohort_config(cfg), seed=cfg.seed,
            min_gap_years=cfg.trainer.min_gap_years, n_probes=v.n_probes,
            probe_delta=v.probe_delta,
            age_factor_range=(v.age_factor_low, v.age_factor_high),
            holdout_subjects=v.holdout_subjects,
            holdout_seed_offset=v.holdout_seed_offset)
        out_dir = root / "verify"
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "disentanglement.json").write_text(report.to_json() + "\n")
        click.echo(f"colinearity {report.condition1_mean_cosine:+.4f} over "
                   f"{report.condition1_n_pairs} pairs; rank corr with age factor "
                   f"{report.correlations.spearman_age:+.3f}")
        _write_run_meta(out_dir, "verify", cfg, started, ["disentanglement.json"])
    _run_command("verify", run)


@main.command()
@_config_opt
@_out_opt
def classify(config_path, out_root):
    """Downstream diagnosis classification across methods, heads, and seeds."""
    def run():
        started = time.perf_counter()
        cfg = config_lib.load_config(config_path)
        root = Path(out_root)
        _require(root / "dataset" / "manifest.jsonl", "generate")
        dataset = data_lib.load_dataset(root / "dataset")
        lssl_net = None
        if "lssl" in cfg.downstream.methods:
            ckpt = _require(root / "train" / "checkpoint_last.pt", "train")
            lssl_net, _ = model_lib.load_checkpoint(ckpt)
        d = cfg.downstream
        out_dir = root / "eval"
        rows, summary = downstream_lib.run_classification_protocol(
            dataset, lssl_net, config_lib.arch_config(cfg),
            config_lib.train_config(cfg), methods=d.methods, heads=d.heads,
            modes=d.modes, seeds=d.seeds, k_folds=d.k_folds,
            split_seed=d.split_seed, classifier_epochs=d.classifier_epochs,
            classifier_lr=d.classifier_lr, classifier_batch=d.classifier_batch,
            beta=d.beta, out_dir=out_dir, cache_dir=out_dir / "cache")
        downstream_lib.write_eval_outputs(rows, summary, out_dir)
        for key in sorted(summary):
            click.echo(f"{key}: mean accuracy {summary[key]['mean_accuracy']:.3f}")
        _write_run_meta(out_dir, "classify", cfg, started, ["eval.csv", "eval.json"])
    _run_command("classify", run)


@main.command()
@_config_opt
@_out_opt
def plot(config_path, out_root):
    """Emit figures from the analysis and evaluation artifacts."""
    def run():
        started = time.perf_counter()
        cfg = config_lib.load_config(config_path)
        root = Path(out_root)
        if not (root / "analysis" / "analysis.json").exists() \
                and not (root / "eval" / "eval.csv").exists():
            raise MissingArtifact(f"no analysis or eval artifacts under {root} "
                                  "(run `lssl analyze` or `lssl classify` first)")
        out_dir = root / "plots"
        written = plots_lib.emit_all(root, out_dir)
        for path in written:
            click.echo(f"wrote {path}")
        _write_run_meta(out_dir, "plot", cfg, started, [p.name for p in written])
    _run_command("plot", run)


if __name__ == "__main__":
    main()
