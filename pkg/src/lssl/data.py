"""Loading generated datasets back from disk.

The JSONL manifest is the source of truth; ``DatasetIndex`` materializes
all images into one array (desk-scale datasets are a few megabytes) plus
flat per-visit metadata, which is what training, analysis, and the
downstream protocols consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, FormatError
from .tensorfile import read_tensor


@dataclass
class VisitRecord:
    subject_id: str
    group: str
    visit_index: int
    time_years: float
    factors: list[float]
    image_path: str


def load_manifest(path: str | Path) -> list[VisitRecord]:
    """Parse a JSONL manifest into visit records (order preserved)."""
    path = Path(path)
    records = []
    required = {"subject_id", "group", "visit_index", "time_years", "factors", "image_path"}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        missing = required - obj.keys()
        if missing:
            raise FormatError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        records.append(VisitRecord(
            subject_id=str(obj["subject_id"]),
            group=str(obj["group"]),
            visit_index=int(obj["visit_index"]),
            time_years=float(obj["time_years"]),
            factors=[float(v) for v in obj["factors"]],
            image_path=str(obj["image_path"]),
        ))
    if not records:
        raise EmptyDataset(f"{path} holds no visit records")
    return records


@dataclass
class DatasetIndex:
    """All images and metadata of one dataset, loaded into memory.

    Arrays are indexed by image position; ``subject_ids`` and ``groups``
    enumerate subjects in first-appearance order.
    """

    records: list[VisitRecord]
    images: np.ndarray          # [N, grid, grid] float32 (or [N, g, g, g])
    times: np.ndarray           # [N] float64
    factors: np.ndarray         # [N, M] float64
    subject_of: np.ndarray      # [N] int, index into subject_ids
    subject_ids: list[str]
    groups: list[str]           # per subject
    image_index_by_path: dict[str, int] = field(default_factory=dict)

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def grid(self) -> int:
        return self.images.shape[1]

    def visits_of(self, subject_idx: int) -> np.ndarray:
        """Image indices of one subject, ordered by visit time."""
        idx = np.flatnonzero(self.subject_of == subject_idx)
        return idx[np.argsort(self.times[idx], kind="stable")]

    def image_labels(self) -> np.ndarray:
        """Per-image binary label: 1 = diseased."""
        per_subject = np.array([1 if g == "diseased" else 0 for g in self.groups])
        return per_subject[self.subject_of]


def load_dataset(dataset_dir: str | Path) -> DatasetIndex:
    """Load manifest + every referenced image from a generated dataset dir."""
    dataset_dir = Path(dataset_dir)
    records = load_manifest(dataset_dir / "manifest.jsonl")
    images = []
    subject_ids: list[str] = []
    groups: list[str] = []
    subject_pos: dict[str, int] = {}
    subject_of = np.empty(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        img_path = dataset_dir / rec.image_path
        if not img_path.exists():
            raise FormatError(f"manifest references missing image {img_path}")
        images.append(read_tensor(img_path))
        if rec.subject_id not in subject_pos:
            subject_pos[rec.subject_id] = len(subject_ids)
            subject_ids.append(rec.subject_id)
            groups.append(rec.group)
        subject_of[i] = subject_pos[rec.subject_id]
    index = DatasetIndex(
        records=records,
        images=np.stack(images),
        times=np.array([r.time_years for r in records]),
        factors=np.array([r.factors for r in records]),
        subject_of=subject_of,
        subject_ids=subject_ids,
        groups=groups,
        image_index_by_path={r.image_path: i for i, r in enumerate(records)},
    )
    return index


def index_from_memory(manifest, images_by_visit) -> DatasetIndex:
    """Build an index directly from an in-memory manifest and rendered images.

    ``images_by_visit`` maps (subject index, visit index) to an array; used
    for held-out cohorts that never touch disk.
    """
    records = []
    images = []
    subject_ids = []
    groups = []
    subject_of = []
    for s_idx, subject in enumerate(manifest.subjects):
        subject_ids.append(subject.subject_id)
        groups.append(subject.group)
        for k, visit in enumerate(subject.visits):
            records.append(VisitRecord(
                subject_id=subject.subject_id, group=subject.group,
                visit_index=k, time_years=visit.time_years,
                factors=[float(v) for v in visit.factors],
                image_path=visit.image_path or f"mem://{subject.subject_id}/{k}",
            ))
            images.append(np.asarray(images_by_visit[(s_idx, k)], dtype=np.float32))
            subject_of.append(s_idx)
    if not records:
        raise EmptyDataset("manifest holds no visits")
    return DatasetIndex(
        records=records,
        images=np.stack(images),
        times=np.array([r.time_years for r in records]),
        factors=np.array([r.factors for r in records]),
        subject_of=np.array(subject_of, dtype=np.int64),
        subject_ids=subject_ids,
        groups=groups,
        image_index_by_path={r.image_path: i for i, r in enumerate(records)},
    )


def render_cohort(config, seed: int) -> DatasetIndex:
    """Generate a cohort fully in memory (no files); used for held-out data."""
    from . import synthgen

    manifest = synthgen.build_manifest(config, seed)
    images = {}
    for s_idx, subject in enumerate(manifest.subjects):
        for k, visit in enumerate(subject.visits):
            images[(s_idx, k)] = synthgen.render_image(
                visit.factors, grid=config.grid, noise_sigma=config.noise_sigma,
                noise_seed=synthgen._derived_seed(seed, s_idx, k), dim=config.dim)
    return index_from_memory(manifest, images)
