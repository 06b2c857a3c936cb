"""Evaluation, forgetting probes and the per-round metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nncore as nn
from .datastream import StreamBatch

CSV_COLUMNS = ["round", "mode", "M", "acc", "loss", "bytes_up", "bytes_down", "cum_bytes",
               "sim_time_s", "median_cpd", "updated_params"]


@dataclass
class RoundMetrics:
    round: int
    mode: str
    M: int
    test_accuracy: float
    test_loss: float
    bytes_up: int
    bytes_down: int
    cum_bytes: int
    sim_time_s: float
    median_group_cpd: float
    updated_param_count: int

    def row(self) -> list[str]:
        return [str(self.round), self.mode, str(self.M), f"{self.test_accuracy:.6f}", f"{self.test_loss:.6f}",
                str(self.bytes_up), str(self.bytes_down), str(self.cum_bytes), f"{self.sim_time_s:.3f}",
                "nan" if math.isnan(self.median_group_cpd) else f"{self.median_group_cpd:.6e}",
                str(self.updated_param_count)]


@dataclass
class ForgettingProbe:
    round: int  # r0, the round the probe batch was captured
    batch: StreamBatch
    accuracy: list[float] = field(default_factory=list)  # accuracy[i] is for round r0 + i

    def observe(self, model: nn.DenseModel) -> float:
        acc, _ = evaluate(model, self.batch)
        self.accuracy.append(acc)
        return acc

    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy)) if self.accuracy else math.nan


def evaluate(model: nn.DenseModel, test: StreamBatch) -> tuple[float, float]:
    """Argmax accuracy and mean natural-log cross-entropy."""
    if len(test) == 0:
        raise ValueError("empty test set")
    logits = nn.forward_logits(model, nn.forward_features(model, test.x))
    acc = float(np.mean(np.argmax(logits, axis=1) == test.y))
    return acc, nn.cross_entropy(logits, test.y)


def forgetting_curve(probe: StreamBatch, snapshots: Sequence[nn.DenseModel]) -> list[float]:
    return [evaluate(m, probe)[0] for m in snapshots]


def probe_gap(with_replay: Sequence[float], without: Sequence[float]) -> float:
    """Mean difference of two probe accuracy series over their common window."""
    n = min(len(with_replay), len(without))
    if n == 0:
        return math.nan
    return float(np.mean(np.asarray(with_replay[:n]) - np.asarray(without[:n])))


def write_metrics_csv(path: str | Path, rows: Iterable[RoundMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
