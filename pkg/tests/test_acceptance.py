"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are gathered in ``RESULTS`` and printed in the pytest terminal summary
(see conftest.py); ``python3 tests/test_acceptance.py`` runs the suite alone.
"""

from __future__ import annotations

import sys
import time
from itertools import combinations

import numpy as np
import pytest

from hfedms import config, icg, lasp, metrics, scc, stp
from hfedms import datastream as ds
from hfedms import nncore as nn

RESULTS: list[str] = []
KAPPA, K_REF, PARAMS, CLS_PARAMS = 0.3, 368, 6.68e6, 6.3e3


def report(n: int, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    within = elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    line = f"criterion {n:>2}: {status}  {detail}  [{elapsed:.1f}s / budget {budget:g}s]"
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert within, line


def rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


# 1 -------------------------------------------------------------------------------

def test_criterion_1_traffic_closed_forms():
    t0 = time.perf_counter()
    rows = [("fedavg", None, 490, 2.629), ("S", 1, 32, 0.172), ("D", 3, 36, 0.097),
            ("D", 5, 34, 0.056), ("D", 7, 67, 0.081), ("D", 9, 81, 0.073)]
    errs, misses = [], []
    for label, T, R, printed in rows:
        if T is None or T == 1:
            b = lasp.closed_form_traffic_s(KAPPA, K_REF, PARAMS, R)
        else:
            b = lasp.closed_form_traffic_d(KAPPA, K_REF, PARAMS, CLS_PARAMS, R, T)
        e = rel(lasp.to_tib(b), printed)
        errs.append(e)
        if e >= 0.005:
            misses.append(f"{label} T={T}: {lasp.to_tib(b):.5f} vs {printed} ({e:.2%})")
    detail = f"max rel err {max(errs):.3%}" + (f"; over 0.5%: {'; '.join(misses)}" if misses else "")
    report(1, not misses, detail, time.perf_counter() - t0, 1)


# 2 -------------------------------------------------------------------------------

def test_criterion_2_runtime_model():
    t0 = time.perf_counter()
    link = lasp.LinkModel(4e6, 7e6, 4)
    hours = lambda b: lasp.to_hours(lasp.runtime_estimate(b, link))
    checks = [("fedavg", hours(lasp.closed_form_traffic_s(KAPPA, K_REF, PARAMS, 490)), 1262, 0.01),
              ("S", hours(lasp.closed_form_traffic_s(KAPPA, K_REF, PARAMS, 32)), 82, 0.01)]
    for T, R, h in [(3, 36, 42), (5, 34, 25), (7, 67, 35), (9, 81, 32)]:
        checks.append((f"D T={T}", hours(lasp.closed_form_traffic_d(KAPPA, K_REF, PARAMS, CLS_PARAMS, R, T)), h, 0.15))
    ok = all(rel(got, want) <= tol for _, got, want, tol in checks)
    detail = ", ".join(f"{lab} {got:.1f}h/{want}h" for lab, got, want, _ in checks)
    report(2, ok, detail, time.perf_counter() - t0, 1)


# 3 -------------------------------------------------------------------------------

def constant_group_configs(n: int, seed: int) -> list[config.ExperimentConfig]:
    """Random (kappa, K, R, T) with a fixed group count, so participants per round equal kappa K."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        M = int(rng.choice([2, 4, 5]))
        L = int(rng.integers(2, 9))
        j = int(rng.integers(1, M + 1))
        out.append(config.load_preset("small", K=M * L, kappa=j / M, beta=M, alpha=1e-3,
                                      R=int(rng.integers(5, 16)), T=int(rng.integers(2, 7)),
                                      seed=int(rng.integers(0, 10_000))))
    return out


def test_criterion_3_ledger_matches_closed_form():
    t0 = time.perf_counter()
    lines, ok = [], True
    for cfg in constant_group_configs(5, 2024):
        for mode in ("hfedms-s", "hfedms-d"):
            res = stp.run_experiment(cfg.replace(mode=mode, scc=None))
            want = res.closed_form_bytes()
            hit = res.ledger.cum_bytes == round(want) and float(res.ledger.cum_bytes) == want
            ok &= hit
            if not hit:
                lines.append(f"{mode} K={cfg.K} kappa={cfg.kappa} R={cfg.R} T={cfg.T}: "
                             f"{res.ledger.cum_bytes} vs {want}")
    detail = "10/10 runs exact" if ok else "; ".join(lines)
    report(3, ok, detail, time.perf_counter() - t0, 60)


# 4 -------------------------------------------------------------------------------

def exhaustive_min(points: np.ndarray, centroids: np.ndarray, size: int) -> float:
    cost = icg.assignment_cost(points, centroids)
    K = len(points)
    best = np.inf
    for first in combinations(range(K), size):
        rest = [i for i in range(K) if i not in first]
        best = min(best, cost[list(first), 0].sum() + cost[rest, 1].sum())
    return best


def test_criterion_4_icg_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    exact = 0
    for _ in range(200):
        K = int(rng.choice([2, 4, 6, 8]))
        pts = rng.integers(0, 20, size=(K, int(rng.integers(2, 6)))).astype(float)
        cen = pts[rng.choice(K, 2, replace=False)] + rng.integers(-3, 4, size=(2, pts.shape[1]))
        a = icg.mcf_assign(pts, cen, K // 2)
        exact += icg.clustering_objective(pts, cen, a) == exhaustive_min(pts, cen, K // 2)
    report(4, exact == 200, f"{exact}/200 instances match exhaustive minimum",
           time.perf_counter() - t0, 60)


# 5 -------------------------------------------------------------------------------

def test_criterion_5_cpd_reduction():
    t0 = time.perf_counter()
    ratios = []
    for seed in range(20):
        pop = ds.make_population(60, 10, 4, 0.3, seed)
        V = np.array([ds.summarize_distribution(ds.next_batch(p, 0, 50, seed), 10).counts
                      for p in pop.profiles], dtype=float)
        ours = icg.grouping_quality(icg.inter_cluster_grouping(range(60), V, 6, seed).groups, V)
        rand = icg.grouping_quality(icg.random_grouping(range(60), 6, seed).groups, V)
        ratios.append(ours["median"] / rand["median"])
    wins = int((np.array(ratios) <= 0.5).sum())
    report(5, wins >= 18, f"{wins}/20 seeds with median ratio <= 0.5 (median ratio {np.median(ratios):.3f})",
           time.perf_counter() - t0, 120)


# 6 -------------------------------------------------------------------------------

def zero_bias_identity_model(rng: np.random.Generator, dims: list[int], classes: int) -> nn.DenseModel:
    ext = [nn.LinearLayer(rng.normal(size=(a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
    return nn.DenseModel(ext, nn.LinearLayer(np.zeros((dims[-1], classes)), np.zeros(classes)), nn.IDENTITY)


def test_criterion_6_scc_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    same_drift = True
    for _ in range(50):
        old = zero_bias_identity_model(rng, [6, 5, 4], 5)
        new = old.copy()
        for layer in new.extractor:
            layer.weights += 0.3 * rng.normal(size=layer.weights.shape)
        batch = ds.StreamBatch(1, rng.normal(size=(5, 6)), rng.permutation(5))
        db = scc.SemanticDB(50)
        z, y = scc.extract_semantics(old, batch)
        db.records = scc.to_records(z, y, 0)
        db.records_extractor = old
        db.arm_backup(0)
        comp = np.array([r.z for r in scc.compensate(db, batch, new)])
        truth, _ = scc.extract_semantics(new, batch)
        worst = max(worst, float(np.max(np.abs(comp - truth))))
        d1, g1 = scc.semantic_drift(batch, new, old)
        d2, g2 = scc.semantic_drift(ds.StreamBatch(2, batch.x.copy(), batch.y.copy()), new, old)
        same_drift &= d1.keys() == d2.keys() and all(np.array_equal(d1[c], d2[c]) for c in d1)
        same_drift &= bool(np.array_equal(g1, g2))
    ok = worst <= 1e-9 and same_drift
    report(6, ok, f"max |compensated - recomputed| = {worst:.2e}; adjacent drift identical: {same_drift}",
           time.perf_counter() - t0, 1)


# 7 -------------------------------------------------------------------------------

def numeric_gradient(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, h: float = 1e-5) -> np.ndarray:
    pv = nn.flatten(model)

    def loss(values):
        m = nn.unflatten(nn.ParamVector(values, pv.layout), model.activation)
        return nn.cross_entropy(nn.forward_logits(m, nn.forward_features(m, x)), y)

    out = np.empty(len(pv))
    for i in range(len(pv)):
        up, dn = pv.values.copy(), pv.values.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (loss(up) - loss(dn)) / (2 * h)
    return out


def test_criterion_7_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        act = nn.RELU if i % 2 else nn.IDENTITY
        dims = [int(rng.integers(2, 5)) for _ in range(int(rng.integers(2, 4)))]
        classes = int(rng.integers(2, 5))
        model = nn.init_model(dims, classes, rng, act)
        for layer in model.layers():
            layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
        x = rng.normal(size=(int(rng.integers(1, 6)), dims[0]))
        y = rng.integers(0, classes, len(x))
        _, grads = nn.loss_and_grads(model, x, y)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])
        fd = numeric_gradient(model, x, y)
        scale = max(np.linalg.norm(flat), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(flat - fd) / scale))
    report(7, worst < 1e-5, f"max relative error {worst:.2e} over 100 models", time.perf_counter() - t0, 10)


# 8 -------------------------------------------------------------------------------

FORGET = dict(forget_classes=[0, 1, 2, 3, 4], forget_after=50, probe_round=45)


@pytest.mark.slow
def test_criterion_8_directional_accuracy_and_savings():
    t0 = time.perf_counter()
    a = b = gap = 0
    ratios, shares = [], []
    for seed in range(10):
        static = config.load_preset("small", static_data=True, seed=seed)
        s = stp.run_experiment(static.replace(mode="hfedms-s", scc=None)).final_accuracy
        f = stp.run_experiment(static.replace(mode="fedavg", scc=None)).final_accuracy
        a += s >= f
        stream = config.load_preset("small", seed=seed, **FORGET)
        d = stp.run_experiment(stream)
        d_off = stp.run_experiment(stream.replace(scc=False))
        s2 = stp.run_experiment(stream.replace(mode="hfedms-s", scc=None))
        b += d.final_accuracy >= s2.final_accuracy
        gap += metrics.probe_gap(d.probe.accuracy, d_off.probe.accuracy) > 0
        ratios.append(d.ledger.cum_bytes / s2.ledger.cum_bytes)
        shares.append(d.ledger.classifier_params / d.ledger.full_params)
    ok = a >= 8 and b >= 8 and gap >= 8 and max(ratios) <= 0.40 and max(shares) <= 0.01
    detail = (f"(a) S>=FedAvg {a}/10; (b) D>=S {b}/10, probe gap>0 {gap}/10; "
              f"(c) D/S bytes {max(ratios):.3f} (saving {1 - max(ratios):.1%}), classifier share {max(shares):.2%}")
    report(8, ok, detail, time.perf_counter() - t0, 600)


# 9 -------------------------------------------------------------------------------

def test_criterion_9_determinism_across_workers(tmp_path):
    t0 = time.perf_counter()
    paths = []
    for workers in (1, 4):
        res = stp.run_experiment(config.load_preset("small", seed=9, workers=workers))
        p = tmp_path / f"w{workers}.csv"
        metrics.write_metrics_csv(p, res.metrics)
        paths.append(p)
    same = paths[0].read_bytes() == paths[1].read_bytes()
    report(9, same, f"metrics CSV byte-identical for workers 1 and 4: {same}", time.perf_counter() - t0, 120)


# 10 ------------------------------------------------------------------------------

def test_criterion_10_group_centroid_properties():
    t0 = time.perf_counter()
    base = np.array([[4.0, 0, 0], [0, 2, 2], [1, 1, 6]])
    V = np.repeat(base, 4, axis=0)
    ga = icg.inter_cluster_grouping(range(12), V, 4, seed=10)
    exact = all(np.array_equal(V[g].mean(axis=0), V.mean(axis=0)) for g in ga.groups)

    rng = np.random.default_rng(10)
    W = rng.dirichlet(np.full(4, 0.4), size=12) * 20
    samples = np.array([W[icg.inter_cluster_grouping(range(12), W, 3, seed=s, n_init=1).groups[0]].mean(axis=0)
                        for s in range(1000)])
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    z = float(np.max(np.abs(samples.mean(axis=0) - W.mean(axis=0)) / se))

    bound_ok, groups_checked = True, 0
    for trial in range(30):
        L, M = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        X = rng.dirichlet(np.full(5, 0.5), size=L * M) * 40
        g = icg.inter_cluster_grouping(range(L * M), X, M, seed=trial)
        sig2 = [max(np.sum((X[c] - X[cl].mean(axis=0)) ** 2) for c in cl) for cl in g.clusters]
        for members in g.groups:
            groups_checked += 1
            bound_ok &= np.sum((X[members].mean(axis=0) - X.mean(axis=0)) ** 2) <= sum(sig2) / L + 1e-9
    ok = exact and z <= 3 and bound_ok
    report(10, ok, f"zero-deviation exact: {exact}; Monte Carlo max |z| = {z:.2f}; "
                   f"1/L bound on {groups_checked} groups: {bound_ok}", time.perf_counter() - t0, 30)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
