import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfedms import config, lasp, metrics, stp
from hfedms import nncore as nn
from hfedms import rng as rngs
from hfedms.datastream import StreamBatch
from hfedms.lasp import SyncMode


def tiny(**kw):
    base = dict(K=12, F=4, feature_dim=5, hidden=[6, 3], n=20, R=6, T=3, kappa=0.5, growth="log",
                alpha=1e-3, beta=2, lr=0.05, test_per_class=20, icg_restarts=2)
    base.update(kw)
    return config.from_dict(base)


# growth ------------------------------------------------------------------------

def test_group_count_examples():
    assert stp.group_count("log", 2, 10, 5, 5, 368) == 10
    assert stp.group_count("log", 2, 10, 5, 10, 368) == 20
    assert stp.group_count("linear", 2, 10, 5, 15, 368) == 50
    assert stp.group_count("exp", 1, 3, 2, 6, 368) == 12


def test_group_count_clamped_and_validated():
    assert stp.group_count("linear", 5, 10, 1, 100, 40) == 40
    assert stp.group_count("exp", 50, 10, 1, 10_000, 40) == 40
    with pytest.raises(ValueError):
        stp.group_count("log", 2, 10, 5, 7, 368)
    with pytest.raises(ValueError):
        stp.group_count("log", 2, 10, 5, 0, 368)


@settings(max_examples=80, deadline=None)
@given(growth=st.sampled_from(["linear", "log", "exp"]), alpha=st.floats(0.01, 3),
       beta=st.integers(1, 12), T=st.integers(1, 9), K=st.integers(1, 400))
def test_group_count_monotone(growth, alpha, beta, T, K):
    counts = [stp.group_count(growth, alpha, beta, T, T * j, K) for j in range(1, 60)]
    assert all(a <= b for a, b in zip(counts, counts[1:]))
    assert all(1 <= c <= K for c in counts)


def test_selected_count():
    assert stp.selected_count(0.3, 10) == 3
    assert stp.selected_count(0.3, 2) == 1
    assert stp.selected_count(0.01, 3) == 1
    assert stp.selected_count(1.0, 7) == 7


# chains ------------------------------------------------------------------------

def test_chain_equals_sequential_sgd():
    rng = np.random.default_rng(0)
    model = nn.init_model([4, 5, 3], 3, rng, nn.RELU)
    b1 = StreamBatch(0, rng.normal(size=(10, 4)), rng.integers(0, 3, 10))
    b2 = StreamBatch(0, rng.normal(size=(7, 4)), rng.integers(0, 3, 7))
    sched = stp.SchedulerConfig(lr=0.1, minibatch=3)
    chained = stp.train_chain(model, [1, 2], [b1, b2], sched, rngs.stream(5, 1))
    g = rngs.stream(5, 1)
    manual = nn.train_one_epoch(model, b1.x, b1.y, 0.1, 3, g)
    manual = nn.train_one_epoch(manual, b2.x, b2.y, 0.1, 3, g)
    assert np.array_equal(nn.flatten(chained).values, nn.flatten(manual).values)


def test_chain_with_zero_lr_is_identity():
    rng = np.random.default_rng(1)
    model = nn.init_model([3, 2], 2, rng)
    b = StreamBatch(0, rng.normal(size=(4, 3)), rng.integers(0, 2, 4))
    out = stp.train_chain(model, [0], [b], stp.SchedulerConfig(lr=0.0), rng)
    assert np.array_equal(nn.flatten(out).values, nn.flatten(model).values)


def test_part_chain_freezes_extractor():
    rng = np.random.default_rng(2)
    model = nn.init_model([3, 4, 2], 3, rng)
    b = StreamBatch(0, rng.normal(size=(9, 3)), rng.integers(0, 3, 9))
    out = stp.train_chain(model, [0, 1], [b, b], stp.SchedulerConfig(lr=0.5), rng, SyncMode.PART)
    assert np.array_equal(nn.flatten(out).extractor_part(), nn.flatten(model).extractor_part())
    assert not np.array_equal(nn.flatten(out).classifier_part(), nn.flatten(model).classifier_part())


def test_aggregate_is_mean_of_group_results(monkeypatch):
    cfg = tiny(mode="fedavg", K=2, kappa=1.0, R=1)
    sim = stp.Simulation(cfg)
    layout = nn.flatten(sim.model)
    planted = {0: np.full(len(layout), 1.0), 1: np.full(len(layout), 4.0)}
    monkeypatch.setattr(stp, "train_chain", lambda model, clients, *a, **k:
                        nn.unflatten(nn.ParamVector(planted[clients[0]], layout.layout)))
    out = sim.step(0)
    assert np.array_equal(out.global_params.values, np.full(len(layout), 2.5))


# schedules -----------------------------------------------------------------------

def test_alternating_schedule_and_persistence():
    res = stp.Simulation(tiny(R=8, T=3))
    outs = [res.step(r) for r in range(8)]
    assert [o.mode for o in outs] == [SyncMode.FULL if r % 3 == 0 else SyncMode.PART for r in range(8)]
    for start in (0, 3, 6):
        cycle = outs[start:start + 3]
        assert all(o.selected_groups == cycle[0].selected_groups for o in cycle)
    for prev, cur in zip(outs, outs[1:]):
        if cur.mode is SyncMode.PART:
            assert np.array_equal(cur.global_params.extractor_part(), prev.global_params.extractor_part())


@pytest.mark.parametrize("R,T,full,part", [(3, 3, 1, 2), (1, 3, 1, 0), (10, 5, 2, 8), (34, 5, 7, 27)])
def test_round_counts(R, T, full, part):
    modes = [stp.sync_mode(r, T) for r in range(R)]
    assert modes.count(SyncMode.FULL) == full == lasp.full_sync_rounds(R, T)
    assert modes.count(SyncMode.PART) == part


def test_static_groups_never_change():
    sim = stp.Simulation(tiny(mode="static", scc=False, R=5))
    first = None
    for r in range(5):
        sim.step(r)
        first = first or sim.grouping
        assert sim.grouping is first


def test_t1_alternating_equals_sequential_mode(tmp_path):
    a = stp.run_experiment(tiny(mode="hfedms-d", T=1, R=5))
    b = stp.run_experiment(tiny(mode="hfedms-s", scc=None, R=5))
    metrics.write_metrics_csv(tmp_path / "a.csv", a.metrics)
    metrics.write_metrics_csv(tmp_path / "b.csv", b.metrics)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_worker_count_does_not_change_results(tmp_path):
    cfg = tiny(K=24, beta=6, kappa=1.0, R=6)
    a = stp.run_experiment(cfg)
    b = stp.run_experiment(cfg.replace(workers=4))
    metrics.write_metrics_csv(tmp_path / "a.csv", a.metrics)
    metrics.write_metrics_csv(tmp_path / "b.csv", b.metrics)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_divergence_carries_context():
    with pytest.raises(nn.TrainingDiverged) as info:
        stp.run_experiment(tiny(lr=1e200, R=2))
    err = info.value
    assert err.round == 0 and err.group is not None and err.client is not None


def test_scc_rejected_outside_alternating_mode():
    with pytest.raises(config.ConfigError):
        tiny(mode="hfedms-s", scc=True)


# traffic -------------------------------------------------------------------------

@pytest.mark.parametrize("kappa,K,beta", [(0.5, 12, 2), (0.25, 16, 4), (1.0, 12, 3)])
def test_sequential_mode_ledger_matches_closed_form(kappa, K, beta):
    res = stp.run_experiment(tiny(mode="hfedms-s", K=K, beta=beta, kappa=kappa, R=5))
    assert res.ledger.cum_bytes == round(lasp.closed_form_traffic_s(kappa, K, res.ledger.full_params, 5))


@pytest.mark.parametrize("R,T", [(7, 3), (6, 2), (4, 4)])
def test_alternating_mode_ledger_matches_closed_form(R, T):
    res = stp.run_experiment(tiny(R=R, T=T))
    led = res.ledger
    expect = lasp.closed_form_traffic_d(0.5, 12, led.full_params, led.classifier_params, R, T)
    assert led.cum_bytes == round(expect)


def test_updated_params_counts_synchronized_parameters():
    res = stp.run_experiment(tiny(R=6))
    prev = 0
    for m in res.metrics:
        step = m.updated_param_count - prev
        assert step * 4 == m.bytes_up + m.bytes_down
        prev = m.updated_param_count


def test_fedavg_reaches_high_accuracy_on_separable_iid_data():
    cfg = config.from_dict(dict(mode="fedavg", K=20, F=4, feature_dim=6, skew=1e6, class_sep=4.0,
                                hidden=[6], n=20, R=100, kappa=0.5, lr=0.05, test_per_class=50))
    res = stp.run_experiment(cfg)
    assert res.final_accuracy >= 0.9
