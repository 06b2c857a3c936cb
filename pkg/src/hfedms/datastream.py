"""Synthetic non-i.i.d. client population and per-round streaming batches.

Synthetic mode: each client owns a Dirichlet-skewed class mix; features are
unit-variance Gaussians around class means shared by the whole population.
CSV mode: each client owns a fixed pool of rows, resampled with replacement
and jittered every round (or consumed without replacement, if asked).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngs

CSV_JITTER = 0.01


class DataFormatError(ValueError):
    """A dataset file does not follow the documented schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PoolExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass
class ClientProfile:
    client_id: int
    class_weights: np.ndarray
    class_means: np.ndarray | None = None  # (F, D), synthetic mode only
    pool_x: np.ndarray | None = None  # CSV mode only
    pool_y: np.ndarray | None = None
    name: str = ""
    replace: bool = True

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9 or not np.any(w > 0):
            raise ValueError(f"client {self.client_id}: class weights must be a probability vector")
        self.class_weights = w
        if not self.name:
            self.name = str(self.client_id)

    @property
    def num_classes(self) -> int:
        return len(self.class_weights)


@dataclass
class StreamBatch:
    round: int
    x: np.ndarray  # (n, D)
    y: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.y)

    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(self.x[i], int(self.y[i])) for i in range(len(self))]

    @classmethod
    def from_examples(cls, round: int, examples: Sequence[LabeledExample], dim: int) -> "StreamBatch":
        if not examples:
            return cls(round, np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
        return cls(round, np.array([e.features for e in examples], dtype=np.float64),
                   np.array([e.label for e in examples], dtype=np.int64))


@dataclass
class ClassDistribution:
    counts: np.ndarray
    degenerate: bool = False

    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.full(len(self.counts), 1.0 / len(self.counts))
        return self.counts / total


@dataclass
class Population:
    profiles: list[ClientProfile]
    test: StreamBatch
    num_classes: int
    feature_dim: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.profiles)


def make_population(K: int, F: int, feature_dim: int, skew: float, seed: int,
                    class_sep: float = 1.0, test_per_class: int = 100) -> Population:
    """Draw ``K`` Dirichlet(skew)-skewed clients sharing ``F`` Gaussian class means.

    Class means are ``class_sep`` times a standard normal vector; the test set
    holds ``test_per_class`` examples of every class.
    """
    if K < 1 or F < 2 or feature_dim < 1:
        raise ValueError("need K >= 1, F >= 2 and feature_dim >= 1")
    if skew <= 0:
        raise ValueError("skew must be positive")
    g = rngs.stream(seed, rngs.POPULATION)
    means = class_sep * g.standard_normal((F, feature_dim))
    profiles = []
    for k in range(K):
        w = rngs.stream(seed, rngs.POPULATION, k + 1).dirichlet(np.full(F, skew))
        # dirichlet can underflow to an all-zero draw for tiny skew
        if not np.all(np.isfinite(w)) or w.sum() <= 0:
            w = np.eye(F)[int(g.integers(F))]
        w = w / w.sum()
        profiles.append(ClientProfile(k, w, means))
    t = rngs.stream(seed, rngs.TEST_SET)
    y = np.repeat(np.arange(F), test_per_class)
    x = means[y] + t.standard_normal((len(y), feature_dim))
    return Population(profiles, StreamBatch(-1, x, y), F, feature_dim, seed,
                      {"skew": skew, "class_sep": class_sep})


def _masked_weights(w: np.ndarray, exclude: Iterable[int]) -> np.ndarray:
    exclude = list(exclude)
    if not exclude:
        return w
    w = w.copy()
    w[exclude] = 0.0
    if w.sum() <= 0:  # the client only had excluded classes
        w = np.ones_like(w)
        w[exclude] = 0.0
    return w / w.sum()


def next_batch(profile: ClientProfile, round: int, n: int, seed: int,
               exclude_classes: Iterable[int] = ()) -> StreamBatch:
    """Draw the client's batch for ``round``; a pure function of (seed, client, round)."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    g = rngs.stream(seed, rngs.BATCH, profile.client_id, round)
    if profile.pool_y is None:
        w = _masked_weights(profile.class_weights, exclude_classes)
        y = g.choice(profile.num_classes, size=n, p=w)
        x = profile.class_means[y] + g.standard_normal((n, profile.class_means.shape[1]))
        return StreamBatch(round, x, y.astype(np.int64))

    allowed = ~np.isin(profile.pool_y, list(exclude_classes))
    idx_pool = np.flatnonzero(allowed)
    if profile.replace:
        if len(idx_pool) == 0:
            raise PoolExhausted(f"client {profile.name}: no usable rows")
        idx = g.choice(idx_pool, size=n, replace=True)
        x = profile.pool_x[idx] + CSV_JITTER * g.standard_normal((n, profile.pool_x.shape[1]))
        return StreamBatch(round, x, profile.pool_y[idx].copy())
    # no replacement: rounds consume consecutive slices of a fixed permutation
    order = rngs.stream(seed, rngs.BATCH, profile.client_id).permutation(idx_pool)
    start = round * n
    if start >= len(order):
        raise PoolExhausted(f"client {profile.name}: pool exhausted at round {round}")
    idx = order[start:start + n]
    return StreamBatch(round, profile.pool_x[idx].copy(), profile.pool_y[idx].copy())


def summarize_distribution(batch: StreamBatch | Sequence[int] | np.ndarray, F: int) -> ClassDistribution:
    labels = np.asarray(batch.y if isinstance(batch, StreamBatch) else batch, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= F):
        raise ValueError(f"label out of range for F={F}")
    return ClassDistribution(np.bincount(labels, minlength=F).astype(np.int64), degenerate=labels.size == 0)


# ---------------------------------------------------------------------------
# CSV ingestion

def write_csv_dataset(path: str | Path, rows: Iterable[tuple[str, int, Sequence[float]]]) -> None:
    rows = list(rows)
    dim = len(rows[0][2]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "label", *(f"f{i}" for i in range(dim))])
        for client, label, feats in rows:
            w.writerow([client, int(label), *(repr(float(v)) for v in feats)])


def read_csv_rows(path: str | Path, F: int, feature_dim: int) -> list[tuple[str, int, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["client", "label", *(f"f{i}" for i in range(feature_dim))]
        if header is None or [h.strip() for h in header] != expected:
            raise DataFormatError(f"header must be {','.join(expected[:3])},...,f{feature_dim - 1}", line=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != feature_dim + 2:
                raise DataFormatError(f"expected {feature_dim + 2} fields, got {len(rec)}", line=lineno)
            try:
                label = int(rec[1])
                feats = np.array([float(v) for v in rec[2:]])
            except ValueError as exc:
                raise DataFormatError(str(exc), line=lineno) from None
            if not 0 <= label < F:
                raise DataFormatError(f"unknown label {label}", line=lineno)
            if not np.all(np.isfinite(feats)):
                raise DataFormatError("non-finite feature", line=lineno)
            rows.append((rec[0].strip(), label, feats))
    return rows


def load_csv_dataset(path: str | Path, F: int, feature_dim: int, seed: int = 0,
                     test_fraction: float = 0.2, replace: bool = True) -> Population:
    """Load ``client,label,f0..`` rows into per-client pools plus a held-out test split.

    Rows whose client is ``test`` form the test split; if there are none, a
    seeded ``test_fraction`` of all rows is held out instead.
    """
    rows = read_csv_rows(path, F, feature_dim)
    if not rows:
        raise DataFormatError("no data rows")
    test_mask = np.array([c == "test" for c, _, _ in rows])
    if not test_mask.any() and test_fraction > 0:
        g = rngs.stream(seed, rngs.CSV_SPLIT)
        n_test = max(1, int(round(test_fraction * len(rows))))
        test_mask[g.choice(len(rows), size=n_test, replace=False)] = True
    names = sorted({c for (c, _, _), t in zip(rows, test_mask) if not t})
    profiles = []
    for k, name in enumerate(names):
        sel = [i for i, (c, _, _) in enumerate(rows) if c == name and not test_mask[i]]
        y = np.array([rows[i][1] for i in sel], dtype=np.int64)
        x = np.array([rows[i][2] for i in sel])
        w = np.bincount(y, minlength=F) / len(y)
        profiles.append(ClientProfile(k, w, None, x, y, name=name, replace=replace))
    tsel = np.flatnonzero(test_mask)
    test = StreamBatch(-1, np.array([rows[i][2] for i in tsel]).reshape(len(tsel), feature_dim),
                       np.array([rows[i][1] for i in tsel], dtype=np.int64))
    return Population(profiles, test, F, feature_dim, seed, {"source": str(path)})
