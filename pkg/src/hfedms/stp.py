"""Sequential-to-parallel scheduling.

Clients inside a group train one after another, handing the model down the
chain; groups train in parallel and the server averages their results. The
number of groups grows with the round index until training is fully
parallel. Under the alternating protocol only every ``T``-th round exchanges
the full model; the rounds in between freeze the extractor and calibrate the
classifier on current plus replayed semantics.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import datastream as ds
from . import icg, lasp, metrics, scc
from . import nncore as nn
from . import rng as rngs
from .config import ExperimentConfig
from .lasp import SyncMode

__all__ = ["Growth", "SyncMode", "SchedulerConfig", "RoundOutcome", "ExperimentResult", "group_count",
           "selected_count", "sync_mode", "train_chain", "run_round", "run_experiment", "Simulation"]


class Growth(str, Enum):
    LINEAR = "linear"
    LOG = "log"
    EXP = "exp"


@dataclass(frozen=True)
class SchedulerConfig:
    T: int = 5
    R: int = 500
    kappa: float = 0.3
    growth: Growth = Growth.LOG
    alpha: float = 2.0
    beta: int = 10
    lr: float = 0.01
    minibatch: int = 5
    epochs: int = 1

    def __post_init__(self):
        if self.T < 1 or self.R < 1:
            raise ValueError("need T >= 1 and R >= 1")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "SchedulerConfig":
        return cls(cfg.effective_T, cfg.R, cfg.kappa, Growth(cfg.growth), cfg.alpha, cfg.beta,
                   cfg.lr, cfg.minibatch, cfg.epochs)


def group_count(growth: Growth | str, alpha: float, beta: int, T: int, r: int, K: int) -> int:
    """Groups at full-sync round ``r`` (a positive multiple of ``T``), clamped to ``[1, K]``."""
    if T < 1 or r < T or r % T:
        raise ValueError(f"round {r} is not a full-sync round for T={T}")
    x = r / T
    growth = Growth(growth)
    if growth is Growth.LINEAR:
        v = alpha * (x - 1) + 1
    elif growth is Growth.LOG:
        v = alpha * math.log(x) + 1
    else:
        try:
            v = math.pow(1 + alpha, x - 1)
        except OverflowError:
            return K
    # guard against values like 2.9999999999 that should be whole numbers
    M = beta * math.floor(v + 1e-9)
    return int(min(max(M, 1), K))


def selected_count(kappa: float, M: int) -> int:
    return max(1, math.ceil(kappa * M - 1e-9))


def sync_mode(r: int, T: int) -> SyncMode:
    return SyncMode.FULL if r % T == 0 else SyncMode.PART


@dataclass
class RoundOutcome:
    round: int
    mode: SyncMode
    M: int
    selected_groups: list[list[int]]
    global_params: nn.ParamVector
    metrics: metrics.RoundMetrics | None = None


# ---------------------------------------------------------------------------
# group chains

CalibrationSource = Callable[[int, ds.StreamBatch, nn.DenseModel], tuple[np.ndarray, np.ndarray]]


def train_chain(model: nn.DenseModel, clients: Sequence[int], batches: Sequence[ds.StreamBatch],
                sched: SchedulerConfig, rng: np.random.Generator, mode: SyncMode = SyncMode.FULL,
                calibration: CalibrationSource | None = None) -> nn.DenseModel:
    """Pass the model down the chain; each client trains on its batch and hands it on.

    In ``PART`` mode the extractor stays frozen and each client trains the
    classifier on the semantics returned by ``calibration`` (by default the
    current batch's own semantics).
    """
    for client, batch in zip(clients, batches):
        try:
            if mode is SyncMode.FULL:
                for _ in range(sched.epochs):
                    model = nn.train_one_epoch(model, batch.x, batch.y, sched.lr, sched.minibatch, rng)
            else:
                if calibration is None:
                    z, y = scc.extract_semantics(model, batch)
                else:
                    z, y = calibration(client, batch, model)
                for _ in range(sched.epochs):
                    model = nn.train_classifier_epoch(model, z, y, sched.lr, sched.minibatch, rng)
        except nn.TrainingDiverged as exc:
            raise exc.with_context(client=client) from None
    return model


# ---------------------------------------------------------------------------
# experiment state

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[metrics.RoundMetrics]
    model: nn.DenseModel
    ledger: lasp.TrafficLedger
    probe: metrics.ForgettingProbe | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_accuracy

    def closed_form_bytes(self) -> float:
        c = self.config
        if c.mode == "hfedms-d" and c.T > 1:
            return lasp.closed_form_traffic_d(c.kappa, c.K, self.ledger.full_params,
                                              self.ledger.classifier_params, c.R, c.T)
        return lasp.closed_form_traffic_s(c.kappa, c.K, self.ledger.full_params, c.R)

    def summary(self) -> dict:
        last = self.metrics[-1]
        out = {
            "final_acc": last.test_accuracy,
            "final_loss": last.test_loss,
            "total_bytes": self.ledger.cum_bytes,
            "total_tib": lasp.to_tib(self.ledger.cum_bytes),
            "closed_form_bytes": self.closed_form_bytes(),
            "est_hours": lasp.to_hours(self.ledger.cum_time_s),
            "rounds": len(self.metrics),
            "params": self.ledger.full_params,
            "classifier_params": self.ledger.classifier_params,
            "warnings": len(self.warnings),
            "config": self.config.to_dict(),
        }
        if self.probe is not None:
            out["probe_round"] = self.probe.round
            out["probe_mean_acc"] = self.probe.mean_accuracy()
        return out


def build_population(cfg: ExperimentConfig) -> ds.Population:
    if cfg.data_csv:
        pop = ds.load_csv_dataset(cfg.data_csv, cfg.F, cfg.feature_dim, cfg.seed,
                                  cfg.csv_test_fraction, cfg.csv_replace)
        if len(pop) != cfg.K:
            raise ValueError(f"{cfg.data_csv} holds {len(pop)} clients but K={cfg.K}")
        return pop
    return ds.make_population(cfg.K, cfg.F, cfg.feature_dim, cfg.skew, cfg.seed,
                              cfg.class_sep, cfg.test_per_class)


class Simulation:
    """Mutable state of one experiment; the scheduler changes it only between rounds."""

    def __init__(self, cfg: ExperimentConfig, population: ds.Population | None = None):
        self.cfg = cfg.validate()
        self.sched = SchedulerConfig.from_experiment(cfg)
        self.pop = population if population is not None else build_population(cfg)
        self.model = nn.init_model(cfg.dims, cfg.F, rngs.stream(cfg.seed, rngs.INIT), cfg.activation)
        total, cls = nn.param_counts(self.model)
        if cfg.traffic_params is not None:
            total, cls = cfg.traffic_params, cfg.traffic_classifier_params
        link = lasp.LinkModel(cfg.rate_up, cfg.rate_down, cfg.bytes_per_param)
        self.ledger = lasp.TrafficLedger(total, cls, link, cfg.compute_s_per_round)
        self.use_scc = cfg.use_scc
        self.dbs = {k: scc.SemanticDB(cfg.Q) for k in range(cfg.K)} if self.use_scc else {}
        self.cycle_semantics: dict[int, list[scc.SemanticRecord]] = {}
        self.grouping: icg.GroupAssignment | None = None
        self.selected: list[int] = []
        self.median_cpd = math.nan
        self.probe: metrics.ForgettingProbe | None = None
        self.history: list[metrics.RoundMetrics] = []
        self._batches: dict[tuple[int, int], ds.StreamBatch] = {}
        self._pool: ThreadPoolExecutor | None = None

    # data ------------------------------------------------------------------
    def excluded(self, r: int) -> tuple[int, ...]:
        c = self.cfg
        if c.forget_classes and r >= c.forget_after:
            return tuple(c.forget_classes)
        return ()

    def batch(self, k: int, r: int) -> ds.StreamBatch:
        key = (k, r)
        if key not in self._batches:
            draw_round = 0 if self.cfg.static_data else r
            self._batches[key] = ds.next_batch(self.pop.profiles[k], draw_round, self.cfg.n,
                                               self.cfg.seed, self.excluded(r))
        return self._batches[key]

    def class_counts(self, r: int) -> np.ndarray:
        return np.array([ds.summarize_distribution(self.batch(k, r), self.cfg.F).counts
                         for k in range(self.cfg.K)], dtype=np.float64)

    # grouping --------------------------------------------------------------
    def regroup(self, r: int) -> None:
        c, K = self.cfg, self.cfg.K
        M = group_count(self.sched.growth, c.alpha, c.beta, self.sched.T, r + self.sched.T, K)
        V = self.class_counts(r)
        self.grouping = icg.inter_cluster_grouping(range(K), V, M, rngs.child_seed(c.seed, rngs.GROUPING, r),
                                                   c.icg_tau_max, round=r, n_init=c.icg_restarts)
        self.median_cpd = icg.grouping_quality(self.grouping.groups, V)["median"] if M > 1 else math.nan

    def select(self, r: int) -> None:
        M = self.grouping.M
        n_sel = selected_count(self.cfg.kappa, M)
        pick = rngs.stream(self.cfg.seed, rngs.SELECTION, r).choice(M, size=n_sel, replace=False)
        self.selected = sorted(int(i) for i in pick)

    def fedavg_groups(self, r: int) -> list[tuple[int, list[int]]]:
        n_sel = selected_count(self.cfg.kappa, self.cfg.K)
        pick = rngs.stream(self.cfg.seed, rngs.FEDAVG_SAMPLE, r).choice(self.cfg.K, size=n_sel, replace=False)
        return [(int(k), [int(k)]) for k in sorted(pick)]

    # replay ----------------------------------------------------------------
    def calibration_source(self, r: int) -> CalibrationSource | None:
        if not self.use_scc:
            return None
        T = self.sched.T
        last = (r + 1) % T == 0

        # the extractor is frozen this round, so the shared global model stands in for every
        # chain copy; stored records then all reference one object
        frozen = self.model

        def source(k: int, batch: ds.StreamBatch, model: nn.DenseModel):
            db = self.dbs[k]
            z, y = scc.extract_semantics(frozen, batch)
            replay = scc.compensate(db, batch, frozen)
            current = scc.to_records(z, y, r)
            self.cycle_semantics[k].extend(current)
            data = scc.build_calibration_dataset(replay, z, y)
            if last:
                db.records = scc.update_storage(replay + self.cycle_semantics[k],
                                                scc.class_means(z, y), self.cfg.Q)
                self.cycle_semantics[k] = []
            return data.semantics, data.labels

        return source

    # rounds ----------------------------------------------------------------
    def _run_groups(self, r: int, mode: SyncMode, tasks: list[tuple[int, list[int]]]) -> list[nn.DenseModel]:
        calib = self.calibration_source(r) if mode is SyncMode.PART else None
        # batches are drawn up front so worker threads only read shared state
        work = [(g, members, [self.batch(k, r) for k in members]) for g, members in tasks]

        def run(item):
            g, members, batches = item
            rng = rngs.stream(self.cfg.seed, rngs.TRAINING, r, g)
            try:
                return train_chain(self.model, members, batches, self.sched, rng, mode, calib)
            except nn.TrainingDiverged as exc:
                raise exc.with_context(round=r, group=g) from None

        if self._pool is not None and len(work) > 1:
            return list(self._pool.map(run, work))
        return [run(item) for item in work]

    def step(self, r: int) -> RoundOutcome:
        c = self.cfg
        T = self.sched.T
        mode = sync_mode(r, T)
        if c.mode == "fedavg":
            tasks = self.fedavg_groups(r)
            M = c.K
        else:
            if mode is SyncMode.FULL and (c.mode != "static" or self.grouping is None):
                self.regroup(r)
            if mode is SyncMode.FULL:
                self.select(r)
            tasks = [(g, self.grouping.groups[g]) for g in self.selected]
            M = self.grouping.M
        if not tasks:
            raise RuntimeError(f"round {r}: no groups selected")

        participants = [k for _, members in tasks for k in members]
        if mode is SyncMode.FULL and self.use_scc:
            for k in participants:
                self.dbs[k].arm_backup(r)
                self.cycle_semantics[k] = []
        if c.probe_round == r:
            self._capture_probe(r)

        results = self._run_groups(r, mode, tasks)
        vectors = [nn.flatten(m) for m in results]
        avg = nn.average_params(vectors)
        if mode is SyncMode.PART:
            avg = nn.flatten(self.model).with_parts(classifier=avg.classifier_part())
        self.model = nn.unflatten(avg, c.activation)

        for _, members in tasks:
            self.ledger.record_chain(len(members), r, mode)
        if mode is SyncMode.FULL and c.mode == "hfedms-d" and T > 1:
            # participants need the fresh extractor for the calibration rounds that follow
            for _ in participants:
                self.ledger.record(lasp.SyncEvent(lasp.EventKind.SCATTER, self.ledger.full_params), r, mode)
        entry = self.ledger.close_round(r, mode)

        acc, loss = metrics.evaluate(self.model, self.pop.test)
        if self.probe is not None:
            self.probe.observe(self.model)
        rm = metrics.RoundMetrics(r, mode.value, M, acc, loss, entry.bytes_up, entry.bytes_down,
                                  self.ledger.cum_bytes, self.ledger.cum_time_s, self.median_cpd,
                                  self.ledger.cum_bytes // self.ledger.link.bytes_per_param)
        self.history.append(rm)
        # batches of finished rounds are never needed again
        self._batches = {key: b for key, b in self._batches.items() if key[1] > r}
        return RoundOutcome(r, mode, M, [list(m) for _, m in tasks], avg, rm)

    def _capture_probe(self, r: int) -> None:
        parts = [self.batch(k, r) for k in range(self.cfg.K)]
        x = np.vstack([b.x for b in parts])
        y = np.concatenate([b.y for b in parts])
        if self.cfg.forget_classes:
            keep = np.isin(y, self.cfg.forget_classes)
            if keep.any():
                x, y = x[keep], y[keep]
        self.probe = metrics.ForgettingProbe(r, ds.StreamBatch(r, x, y))

    def run(self) -> ExperimentResult:
        if self.cfg.workers > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.cfg.workers)
        try:
            for r in range(self.cfg.R):
                self.step(r)
        finally:
            if self._pool is not None:
                self._pool.shutdown()
                self._pool = None
        warnings = [w for db in self.dbs.values() for w in db.warnings]
        return ExperimentResult(self.cfg, self.history, self.model, self.ledger, self.probe, warnings)


def run_round(sim: Simulation, r: int) -> RoundOutcome:
    return sim.step(r)


def run_experiment(cfg: ExperimentConfig, mode: str | None = None, seed: int | None = None,
                   population: ds.Population | None = None) -> ExperimentResult:
    changes = {}
    if mode is not None:
        changes["mode"] = mode
    if seed is not None:
        changes["seed"] = seed
    if changes:
        cfg = cfg.replace(**changes)
    return Simulation(cfg, population).run()
