"""Subject-stratified splitting and batch assembly.

Splits operate on whole subjects so no subject's volumes ever span train and
validation. Batches are assembled lazily from manifest records through a
caching volume loader.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import volume_io
from .volume_io import ARTIFACT, NORMAL, Manifest

LABEL_TO_INDEX = {NORMAL: 0, ARTIFACT: 1}
INDEX_TO_LABEL = {0: NORMAL, 1: ARTIFACT}


class UnlabeledSubject(ValueError):
    pass


class TooFewSubjects(ValueError):
    pass


@dataclass
class SplitSpec:
    val_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


@dataclass
class Batch:
    x: np.ndarray  # [N, 1, tz, ty, tx] float32
    ids: list
    targets: np.ndarray  # [N] int64, 0 = normal, 1 = artifact


def subject_class(records) -> str:
    """Artifact if any labeled volume of the subject is an artifact."""
    labels = [r.label for r in records if r.label is not None]
    if not labels:
        ids = [r.id for r in records]
        raise UnlabeledSubject(f"no labeled volumes for subject of records {ids[:3]}")
    return ARTIFACT if ARTIFACT in labels else NORMAL


def stratified_subject_split(manifest: Manifest, spec: SplitSpec):
    """Per-class subject split into (train, val); no subject crosses over.

    Round-half-up of val_fraction * n subjects per class, at least 1 and at
    most n - 1, selected by seeded shuffle.
    """
    by_subject = {}
    for rec in manifest.records:
        by_subject.setdefault(rec.subject_id, []).append(rec)

    classes = {}
    for subject, recs in by_subject.items():
        classes.setdefault(subject_class(recs), []).append(subject)

    rng = np.random.default_rng(spec.seed)
    val_subjects = set()
    for cls in (ARTIFACT, NORMAL):
        subjects = sorted(classes.get(cls, []))
        if not subjects:
            continue
        if len(subjects) < 2:
            raise TooFewSubjects(
                f"class {cls!r} has {len(subjects)} subject(s); need >= 2 to split"
            )
        n_val = int(math.floor(spec.val_fraction * len(subjects) + 0.5))
        n_val = max(1, min(n_val, len(subjects) - 1))
        order = np.array(subjects)
        rng.shuffle(order)
        val_subjects.update(order[:n_val])

    train_recs = [r for r in manifest.records if r.subject_id not in val_subjects]
    val_recs = [r for r in manifest.records if r.subject_id in val_subjects]
    mk = lambda recs: Manifest(
        list(recs),
        source_description=manifest.source_description,
        base_dir=manifest.base_dir,
    )
    return mk(train_recs), mk(val_recs)


class VolumeCache:
    """Loads, preprocesses and caches volumes keyed by scan path."""

    def __init__(self, target_dims, max_scans=None):
        self.target_dims = tuple(target_dims)
        self.max_scans = max_scans
        self._scans = {}  # path -> (raw volumes, list of preprocessed arrays)

    def get(self, manifest: Manifest, record) -> np.ndarray:
        path = str(manifest.resolve_scan_path(record))
        if path not in self._scans:
            scan = volume_io.read_nifti(path)
            self._scans[path] = (scan.volumes, [None] * len(scan.volumes))
            if self.max_scans is not None and len(self._scans) > self.max_scans:
                oldest = next(iter(self._scans))
                if oldest != path:
                    del self._scans[oldest]
        raw, ready = self._scans[path]
        if record.volume_index >= len(raw):
            raise IndexError(
                f"{record.id}: volume_index {record.volume_index} out of range "
                f"for scan with {len(raw)} volumes"
            )
        if ready[record.volume_index] is None:
            vol = volume_io.preprocess(raw[record.volume_index], self.target_dims)
            # network layout [z, y, x]
            ready[record.volume_index] = np.ascontiguousarray(
                vol.voxels.transpose(2, 1, 0), dtype=np.float32
            )
        return ready[record.volume_index]


def make_batches(manifest: Manifest, batch_size: int, shuffle: bool, seed, cache: VolumeCache):
    """Yield batches covering every record exactly once; final batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    records = list(manifest.records)
    if shuffle:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(records))
        records = [records[i] for i in order]
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        vols = [cache.get(manifest, r) for r in chunk]
        x = np.stack(vols)[:, None, :, :, :]
        targets = np.array(
            [LABEL_TO_INDEX[r.label] if r.label is not None else -1 for r in chunk],
            dtype=np.int64,
        )
        yield Batch(x=x, ids=[r.id for r in chunk], targets=targets)
