"""Inter-cluster grouping.

Clients are clustered by class-distribution vector into ``L`` clusters of
exactly equal size, then every group takes one client from each cluster.
Groups built that way have centroids that match the global centroid in
expectation, so their class mixes are close to each other.

The equal-size assignment step is a transportation problem (clients supply
one unit each, every cluster demands ``size`` units) and is solved exactly
by successive shortest augmenting paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import rng as rngs

_EPS = 1e-12


# ---------------------------------------------------------------------------
# exact equal-size assignment

def transport_assign(cost: np.ndarray, capacity: int) -> np.ndarray:
    """Minimum-cost assignment of rows to columns, each column taking ``capacity`` rows.

    Rows are inserted one at a time along the shortest augmenting path in
    the residual network. Clusters are the only nodes that matter on such a
    path (a hop ``l -> l2`` moves the cheapest member of ``l`` over to
    ``l2``), so the path search is Bellman-Ford over ``L`` nodes. After each
    insertion the partial assignment is optimal for the rows seen so far,
    which makes the final one optimal. Ties go to the lowest row index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    K, L = cost.shape
    if K != L * capacity:
        raise ValueError(f"{K} points cannot fill {L} clusters of size {capacity}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    assign = np.full(K, -1, dtype=np.int64)
    load = np.zeros(L, dtype=np.int64)
    cols = np.arange(L)
    for k in range(K):
        dist = cost[k].copy()
        pred = np.full(L, -1, dtype=np.int64)
        mover = np.full(L, -1, dtype=np.int64)
        placed = np.flatnonzero(assign >= 0)
        if placed.size:
            # moving member i of cluster l to l2 costs cost[i, l2] - cost[i, l];
            # rows sorted by cluster (stable, so by index inside a cluster)
            order = np.argsort(assign[placed], kind="stable")
            rows = placed[order]
            owner = assign[rows]
            delta = cost[rows] - cost[rows, owner][:, None]
            heads, starts, counts = np.unique(owner, return_index=True, return_counts=True)
            best = np.minimum.reduceat(delta, starts, axis=0)
            hit = delta == np.repeat(best, counts, axis=0)
            pos = np.where(hit, np.arange(len(rows))[:, None], len(rows))
            first = np.minimum.reduceat(pos, starts, axis=0)
            move = np.full((L, L), np.inf)
            who = np.full((L, L), -1, dtype=np.int64)
            move[heads] = best
            who[heads] = rows[first]
            np.fill_diagonal(move, np.inf)
            for _ in range(L):
                cand = dist[:, None] + move
                src = np.argmin(cand, axis=0)
                via = cand[src, cols]
                better = via < dist - _EPS * (1.0 + np.abs(dist))
                if not better.any():
                    break
                dist[better] = via[better]
                pred[better] = src[better]
                mover[better] = who[src[better], cols[better]]
        open_ = np.flatnonzero(load < capacity)
        target = open_[np.argmin(dist[open_])]
        cur, hops = target, 0
        while pred[cur] >= 0:
            assign[mover[cur]] = cur
            cur = pred[cur]
            hops += 1
            if hops > L:
                raise RuntimeError("augmenting path did not terminate")
        assign[k] = cur
        load[target] += 1
    return assign


def assignment_cost(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Matrix of ``0.5 * ||V_k - C_l||^2``."""
    diff = points[:, None, :] - centroids[None, :, :]
    return 0.5 * np.einsum("klf,klf->kl", diff, diff)


def clustering_objective(points: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    diff = points - np.asarray(centroids, dtype=np.float64)[assignment]
    return float(0.5 * np.sum(diff * diff))


def mcf_assign(points: np.ndarray, centroids: np.ndarray, size: int) -> np.ndarray:
    """Exact minimiser of the clustering objective with every cluster holding ``size`` points."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if points.ndim != 2 or centroids.ndim != 2:
        raise ValueError("points and centroids must be 2-D")
    if len(points) != len(centroids) * size:
        raise ValueError(f"{len(points)} points cannot fill {len(centroids)} clusters of size {size}")
    return transport_assign(assignment_cost(points, centroids), size)


# ---------------------------------------------------------------------------
# constrained clustering

@dataclass
class ClusterState:
    centroids: np.ndarray  # (L, F), member means of the final assignment
    assignment: np.ndarray  # point index -> cluster
    cluster_size: int
    init_centroids: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def members(self, l: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == l)

    def objective(self, points: np.ndarray) -> float:
        return clustering_objective(points, self.centroids, self.assignment)


def kmeanspp_init(points: np.ndarray, L: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, L):
        total = d2.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].astype(np.float64)


def _member_means(points: np.ndarray, assignment: np.ndarray, L: int) -> np.ndarray:
    out = np.zeros((L, points.shape[1]))
    np.add.at(out, assignment, points)
    return out / np.bincount(assignment, minlength=L)[:, None]


def constrained_cluster(V: np.ndarray, L: int, tau_max: int = 10, tol: float = 1e-6,
                        seed: int = 0, n_init: int = 10) -> ClusterState:
    """Alternate exact equal-size assignment and centroid updates.

    With ``n_init > 1`` the whole procedure is restarted from fresh seeds and
    the run with the lowest final objective is kept.
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if n_init > 1:
        runs = [constrained_cluster(V, L, tau_max, tol, rngs.child_seed(seed, rngs.GROUPING, i), 1)
                for i in range(n_init)]
        return min(runs, key=lambda s: s.objective(np.asarray(V, dtype=np.float64)))
    V = np.asarray(V, dtype=np.float64)
    if L < 1:
        raise ValueError("need at least one cluster")
    if V.ndim != 2 or len(V) == 0:
        raise ValueError("distribution matrix is empty")
    if len(V) % L:
        raise ValueError(f"{len(V)} points are not divisible into {L} clusters")
    size = len(V) // L
    init = kmeanspp_init(V, L, rngs.stream(seed, rngs.GROUPING, 1))
    centroids = init.copy()
    assignment = mcf_assign(V, centroids, size)
    history = [clustering_objective(V, centroids, assignment)]
    converged, it = False, 0
    for it in range(1, tau_max + 1):
        updated = _member_means(V, assignment, L)
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < tol:
            converged = True
            break
        assignment = mcf_assign(V, centroids, size)
        history.append(clustering_objective(V, centroids, assignment))
    return ClusterState(_member_means(V, assignment, L), assignment, size, init, history,
                        it if tau_max else 0, converged)


# ---------------------------------------------------------------------------
# group construction

@dataclass
class GroupAssignment:
    groups: list[list[int]]  # client ids in training order
    round_created: int = 0
    clusters: list[list[int]] = field(default_factory=list)  # client ids per cluster
    idle: list[int] = field(default_factory=list)
    cluster_state: ClusterState | None = None

    @property
    def M(self) -> int:
        return len(self.groups)

    def assigned(self) -> list[int]:
        return [c for g in self.groups for c in g]


def inter_cluster_grouping(clients: Sequence[int], V: np.ndarray, M: int, seed: int,
                           tau_max: int = 10, tol: float = 1e-6, round: int = 0,
                           n_init: int = 10) -> GroupAssignment:
    """Build ``M`` groups of ``L = K // M`` clients, one per equal-size cluster.

    ``V`` holds one class-count row per entry of ``clients``. Clients that
    are not sampled, or not drawn into a group, sit out as ``idle``.
    """
    clients = list(clients)
    V = np.asarray(V, dtype=np.float64)
    K = len(clients)
    if len(V) != K:
        raise ValueError("one distribution row per client is required")
    if M < 1:
        raise ValueError("need at least one group")
    if M > K:
        raise ValueError(f"cannot form {M} groups from {K} clients")
    L = K // M
    n_sampled = L * (K // L)
    g = rngs.stream(seed, rngs.GROUPING, 0)
    picked = np.sort(g.choice(K, size=n_sampled, replace=False))
    state = constrained_cluster(V[picked], L, tau_max, tol, seed, n_init)
    clusters = [[clients[picked[i]] for i in state.members(l)] for l in range(L)]
    draws = [list(g.permutation(c)) for c in clusters]
    groups = []
    for m in range(M):
        members = [int(d[m]) for d in draws]
        groups.append([int(c) for c in g.permutation(members)])
    used = {c for grp in groups for c in grp}
    idle = [c for c in clients if c not in used]
    return GroupAssignment(groups, round, [[int(c) for c in cl] for cl in clusters], idle, state)


def random_grouping(clients: Sequence[int], M: int, seed: int) -> GroupAssignment:
    """Uniformly random groups with the same shape ICG would produce."""
    clients = list(clients)
    K = len(clients)
    if M > K:
        raise ValueError(f"cannot form {M} groups from {K} clients")
    L = K // M
    perm = rngs.stream(seed, rngs.GROUPING, 2).permutation(K)
    groups = [[clients[i] for i in perm[m * L:(m + 1) * L]] for m in range(M)]
    return GroupAssignment(groups, idle=[clients[i] for i in perm[M * L:]])


# ---------------------------------------------------------------------------
# class probability distance

@dataclass(frozen=True)
class MmdConfig:
    """Kernel settings for the class probability distance.

    ``samples="classes"`` draws class labels (one-hot points) with the given
    probabilities; ``samples="entries"`` instead treats the probability
    values themselves as a set of scalar samples.
    """

    bandwidth: float | None = None  # None -> median heuristic
    samples: str = "classes"

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("kernel bandwidth must be positive")
        if self.samples not in ("classes", "entries"):
            raise ValueError(f"unknown sample space {self.samples!r}")


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.vstack([x, y])
    iu = np.triu_indices(len(z), k=1)
    d = np.sqrt(_sq_dists(z, z)[iu])
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def _weights(w: np.ndarray | None, n: int) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative with a positive sum")
    return w / w.sum()


def mmd2(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None,
         wx: np.ndarray | None = None, wy: np.ndarray | None = None) -> float:
    """Biased squared MMD between (optionally weighted) sample sets, Gaussian RBF kernel.

    Rows are samples. Every expectation runs over all pairs, diagonal included.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise ValueError("sample sets must be non-empty")
    px, py = _weights(wx, len(x)), _weights(wy, len(y))
    sigma = median_bandwidth(x, y) if bandwidth is None else bandwidth
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = px @ np.exp(-gamma * _sq_dists(x, x)) @ px
    kyy = py @ np.exp(-gamma * _sq_dists(y, y)) @ py
    kxy = px @ np.exp(-gamma * _sq_dists(x, y)) @ py
    return max(0.0, float(kxx + kyy - 2.0 * kxy))


def cpd(dist_a: np.ndarray, dist_b: np.ndarray, cfg: MmdConfig = MmdConfig()) -> float:
    """Class probability distance between two normalised class distributions."""
    a = np.asarray(dist_a, dtype=np.float64).ravel()
    b = np.asarray(dist_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("distributions must be non-empty")
    if cfg.samples == "entries":
        return mmd2(a.reshape(-1, 1), b.reshape(-1, 1), cfg.bandwidth)
    if a.size != b.size:
        raise ValueError("distributions cover different class counts")
    classes = np.eye(a.size)
    return mmd2(classes, classes, cfg.bandwidth, a, b)


def group_distributions(groups: Sequence[Sequence[int]], V: np.ndarray,
                        index: dict[int, int] | None = None) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    rows = []
    for grp in groups:
        idx = [index[c] for c in grp] if index is not None else list(grp)
        total = V[idx].sum(axis=0)
        s = total.sum()
        rows.append(total / s if s > 0 else np.full(V.shape[1], 1.0 / V.shape[1]))
    return np.array(rows)


def grouping_quality(groups: Sequence[Sequence[int]], V: np.ndarray, cfg: MmdConfig = MmdConfig(),
                     index: dict[int, int] | None = None) -> dict[str, float]:
    """All-pairs CPD statistics over the normalised group distributions.

    ``index`` maps client ids to rows of ``V`` when they are not the same.
    """
    if len(groups) < 2:
        raise ValueError("need at least two groups to compare")
    dists = group_distributions(groups, V, index)
    vals = np.array([cpd(dists[i], dists[j], cfg) for i, j in combinations(range(len(dists)), 2)])
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "pairs": int(len(vals)),
            "mean": float(vals.mean())}
