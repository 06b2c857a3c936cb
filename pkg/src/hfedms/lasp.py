"""Sync-mode byte accounting, closed-form traffic totals and link-time modelling.

Every transfer is booked as a hop event. A group chain costs one pull, one
relay per handoff and one push; full-sync rounds of the alternating protocol
additionally scatter the fresh model to each participant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

TIB = 2 ** 40


class SyncMode(str, Enum):
    FULL = "full"
    PART = "part"


class EventKind(str, Enum):
    PULL = "pull"  # server -> first client
    RELAY = "relay"  # client -> next client, counted both ways
    PUSH = "push"  # last client -> server
    SCATTER = "scatter"  # server -> client after aggregation


@dataclass(frozen=True)
class LinkModel:
    rate_up: float = 4e6  # bits/s
    rate_down: float = 7e6
    bytes_per_param: int = 4

    def __post_init__(self):
        if not (self.rate_up > 0 and self.rate_down > 0):
            raise ValueError("link rates must be positive")
        if self.bytes_per_param < 1:
            raise ValueError("bytes_per_param must be >= 1")


@dataclass(frozen=True)
class SyncEvent:
    kind: EventKind
    params_moved: int

    def split(self, bytes_per_param: int) -> tuple[int, int]:
        """(bytes_up, bytes_down) for this hop."""
        b = int(self.params_moved) * bytes_per_param
        if self.kind is EventKind.PULL or self.kind is EventKind.SCATTER:
            return 0, b
        if self.kind is EventKind.PUSH:
            return b, 0
        return b, b


@dataclass
class LedgerEntry:
    round: int
    mode: SyncMode
    bytes_up: int = 0
    bytes_down: int = 0
    events: int = 0

    @property
    def total(self) -> int:
        return self.bytes_up + self.bytes_down


class SyncError(ValueError):
    pass


@dataclass
class TrafficLedger:
    """Per-round byte counts plus cumulative bytes and simulated link time.

    ``full_params`` and ``classifier_params`` are the counts a full-sync and
    a classifier-only exchange must carry; events are checked against them.
    """

    full_params: int
    classifier_params: int
    link: LinkModel = field(default_factory=LinkModel)
    compute_s_per_round: float = 0.0
    entries: list[LedgerEntry] = field(default_factory=list)
    cum_bytes: int = 0
    cum_time_s: float = 0.0

    def __post_init__(self):
        if self.full_params < 1 or not 0 < self.classifier_params <= self.full_params:
            raise ValueError("need 0 < classifier_params <= full_params")

    def _entry(self, round: int, mode: SyncMode) -> LedgerEntry:
        if self.entries and self.entries[-1].round == round:
            e = self.entries[-1]
            if e.mode is not mode:
                raise SyncError(f"round {round} already booked as {e.mode.value}")
            return e
        if self.entries and round < self.entries[-1].round:
            raise SyncError("rounds must be booked in order")
        e = LedgerEntry(round, mode)
        self.entries.append(e)
        return e

    def record(self, event: SyncEvent, round: int, mode: SyncMode) -> LedgerEntry:
        if event.params_moved <= 0:
            raise SyncError("event moves no parameters")
        expected = self.full_params if mode is SyncMode.FULL else self.classifier_params
        if event.params_moved != expected:
            raise SyncError(f"{mode.value} sync must move {expected} params, got {event.params_moved}")
        if event.kind is EventKind.SCATTER and mode is not SyncMode.FULL:
            raise SyncError("scatter only happens on full-sync rounds")
        e = self._entry(round, mode)
        up, down = event.split(self.link.bytes_per_param)
        e.bytes_up += up
        e.bytes_down += down
        e.events += 1
        self.cum_bytes += up + down
        self.cum_time_s += runtime_estimate(up + down, self.link)
        return e

    def record_chain(self, group_size: int, round: int, mode: SyncMode) -> None:
        """Pull, ``group_size - 1`` relays and a push for one group."""
        params = self.full_params if mode is SyncMode.FULL else self.classifier_params
        for ev in chain_events(group_size, params):
            self.record(ev, round, mode)

    def close_round(self, round: int, mode: SyncMode) -> LedgerEntry:
        """Make sure the round has an entry (possibly empty) and add compute time."""
        e = self._entry(round, mode)
        self.cum_time_s += self.compute_s_per_round
        return e

    @property
    def total_up(self) -> int:
        return sum(e.bytes_up for e in self.entries)

    @property
    def total_down(self) -> int:
        return sum(e.bytes_down for e in self.entries)


def record_sync(ledger: TrafficLedger, event: SyncEvent, round: int, mode: SyncMode) -> TrafficLedger:
    ledger.record(event, round, mode)
    return ledger


def chain_events(group_size: int, params: int) -> list[SyncEvent]:
    if group_size < 1:
        raise ValueError("group must have at least one client")
    return ([SyncEvent(EventKind.PULL, params)]
            + [SyncEvent(EventKind.RELAY, params)] * (group_size - 1)
            + [SyncEvent(EventKind.PUSH, params)])


# ---------------------------------------------------------------------------
# closed forms

def closed_form_traffic_s(kappa: float, K: int, params: float, R: int) -> float:
    """Every participant moves the full model twice per round: ``8 kappa K M R`` bytes."""
    return 8.0 * kappa * K * params * R


def closed_form_traffic_d(kappa: float, K: int, params: float, classifier_params: float,
                          R: int, T: int) -> float:
    """Full syncs every ``T`` rounds (three transfers), classifier-only otherwise (two)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    full = -(-R // T)
    return 4.0 * kappa * K * (3.0 * params * full + 2.0 * (R - full) * classifier_params)


def runtime_estimate(total_bytes: float, link: LinkModel = LinkModel()) -> float:
    """Seconds to move ``total_bytes`` with half the bits going each way, serialised."""
    half_bits = total_bytes * 8.0 / 2.0
    return half_bits / link.rate_up + half_bits / link.rate_down


def directional_time(bytes_up: float, bytes_down: float, link: LinkModel = LinkModel()) -> float:
    """Alternative model: every byte travels at the rate of its own direction."""
    return bytes_up * 8.0 / link.rate_up + bytes_down * 8.0 / link.rate_down


def to_tib(n_bytes: float) -> float:
    return n_bytes / TIB


def to_hours(seconds: float) -> float:
    return seconds / 3600.0


def full_sync_rounds(R: int, T: int) -> int:
    return math.ceil(R / T) if R > 0 else 0
