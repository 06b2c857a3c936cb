"""Semantic replay with drift compensation.

Each client keeps a bounded store of extractor outputs (semantics) from past
rounds. When the shared extractor moves, the stored semantics go stale; the
client estimates the per-class drift on its current batch, using a backup of
the extractor the records were computed with, and shifts the stored records
by it. Current and compensated semantics together train the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nncore as nn
from .datastream import StreamBatch


@dataclass(frozen=True)
class SemanticRecord:
    z: np.ndarray
    label: int
    round_stored: int
    index: int = 0  # insertion order within the round, breaks ties


@dataclass
class CalibrationDataset:
    semantics: np.ndarray  # (n, d)
    labels: np.ndarray

    def __post_init__(self):
        if len(self.semantics) != len(self.labels):
            raise ValueError("semantics and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SemanticDB:
    capacity: int
    records: list[SemanticRecord] = field(default_factory=list)
    backup_extractor: nn.DenseModel | None = None
    r_bak: int | None = None
    compensated_cache: list[SemanticRecord] | None = None
    # extractor the stored records are consistent with; becomes the next backup
    records_extractor: nn.DenseModel | None = None
    warnings: list[str] = field(default_factory=list)
    last_drift_norm: float = 0.0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be >= 0")

    def __len__(self) -> int:
        return len(self.records)

    def arm_backup(self, round: int) -> None:
        """Called when the client joins a full-sync round: the old extractor becomes the backup."""
        self.backup_extractor = self.records_extractor
        self.r_bak = round if self.records_extractor is not None else None
        self.compensated_cache = None

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def extract_semantics(model: nn.DenseModel, batch: StreamBatch) -> tuple[np.ndarray, np.ndarray]:
    """Extractor outputs and labels for every example of the batch."""
    z = nn.forward_features(model, batch.x)
    return np.atleast_2d(z), np.asarray(batch.y, dtype=np.int64)


def to_records(z: np.ndarray, labels: np.ndarray, round: int) -> list[SemanticRecord]:
    if not np.all(np.isfinite(z)):
        raise ValueError("semantic vectors must be finite")
    return [SemanticRecord(z[i].copy(), int(labels[i]), round, i) for i in range(len(labels))]


def semantic_drift(batch: StreamBatch, current: nn.DenseModel,
                   old: nn.DenseModel) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Per-class and all-class mean drift of the batch's semantics from ``old`` to ``current``."""
    new_z, y = extract_semantics(current, batch)
    old_z, _ = extract_semantics(old, batch)
    if len(y) == 0:
        raise ValueError("drift needs a non-empty batch")
    per_class = {int(c): new_z[y == c].mean(axis=0) - old_z[y == c].mean(axis=0) for c in np.unique(y)}
    return per_class, new_z.mean(axis=0) - old_z.mean(axis=0)


def compensate(db: SemanticDB, batch: StreamBatch, current: nn.DenseModel) -> list[SemanticRecord]:
    """Shift stored records by the estimated drift; runs once per cycle, then reuses the cache.

    Classes missing from the batch get the all-class drift. Compensated
    records replace the stored ones and the backup is released.
    """
    if db.compensated_cache is not None:
        return db.compensated_cache
    if not db.records:
        out: list[SemanticRecord] = []
    elif db.backup_extractor is None:
        db.warnings.append("compensation skipped: no backup extractor")
        out = list(db.records)
    else:
        per_class, overall = semantic_drift(batch, current, db.backup_extractor)
        out = [SemanticRecord(rec.z + per_class.get(rec.label, overall), rec.label, rec.round_stored, rec.index)
               for rec in db.records]
        norms = {c: float(np.linalg.norm(d)) for c, d in per_class.items()}
        fallback = float(np.linalg.norm(overall))
        db.last_drift_norm = float(np.mean([norms.get(r.label, fallback) for r in db.records]))
    db.records = out
    db.records_extractor = current
    db.backup_extractor = None
    db.r_bak = None
    db.compensated_cache = out
    return out


def build_calibration_dataset(records: Sequence[SemanticRecord], current_z: np.ndarray,
                              current_labels: np.ndarray) -> CalibrationDataset:
    current_z = np.atleast_2d(np.asarray(current_z, dtype=np.float64))
    current_labels = np.asarray(current_labels, dtype=np.int64)
    if not records:
        return CalibrationDataset(current_z.copy(), current_labels.copy())
    hz = np.array([r.z for r in records])
    hy = np.array([r.label for r in records], dtype=np.int64)
    return CalibrationDataset(np.vstack([current_z, hz]), np.concatenate([current_labels, hy]))


def class_means(z: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): z[labels == c].mean(axis=0) for c in np.unique(labels)}


def update_storage(candidates: Sequence[SemanticRecord], means: dict[int, np.ndarray],
                   Q: int) -> list[SemanticRecord]:
    """Keep the ``Q`` candidates closest to their own class mean.

    A class with no entry in ``means`` is measured against the mean of its
    candidates. Ties go to the older round, then the lower insertion index.
    """
    if Q < 0:
        raise ValueError("capacity must be >= 0")
    if not candidates:
        return []
    Z = np.array([r.z for r in candidates])
    y = np.array([r.label for r in candidates])
    ref = np.empty_like(Z)
    for c in np.unique(y):
        mask = y == c
        ref[mask] = means[int(c)] if int(c) in means else Z[mask].mean(axis=0)
    delta = np.linalg.norm(Z - ref, axis=1)
    rounds = np.array([r.round_stored for r in candidates])
    index = np.array([r.index for r in candidates])
    # lexsort keys run from least to most significant
    order = np.lexsort((np.arange(len(candidates)), index, rounds, delta))
    return [candidates[i] for i in order[:Q]]
