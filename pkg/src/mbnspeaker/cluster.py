"""Final clustering of embeddings and NMI scoring."""

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.distance import cdist

from mbnspeaker._util import make_rng, worker_count


class ClusterError(ValueError):
    pass


class ClusterWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KMeansConfig:
    n_clusters: int
    restarts: int = 10
    max_iters: int = 300
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.restarts < 1 or self.max_iters < 1:
            raise ClusterError("n_clusters, restarts and max_iters must be positive")
        if not self.tol > 0:
            raise ClusterError("tol must be positive")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    objective: Optional[float] = None
    centers: Optional[np.ndarray] = None
    # per-iteration objectives of the winning k-means restart
    history: List[float] = field(default_factory=list)
    # objective of every k-means restart, in restart order
    restart_objectives: List[float] = field(default_factory=list)
    # agglomerative merges as (cluster_a, cluster_b, distance, new_size)
    merges: List[tuple] = field(default_factory=list)

    @property
    def num_clusters(self):
        return int(len(np.unique(self.labels)))


def _sq_dists(Y, centers):
    d2 = (
        np.sum(Y * Y, axis=1)[:, None]
        - 2.0 * Y @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _objective(Y, centers, labels):
    diff = Y - centers[labels]
    return float(np.sum(diff * diff))


def _kmeanspp(Y, c, rng):
    n = Y.shape[0]
    centers = np.empty((c, Y.shape[1]))
    centers[0] = Y[rng.integers(n)]
    closest = np.sum((Y - centers[0]) ** 2, axis=1)
    for j in range(1, c):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[j] = Y[idx]
        closest = np.minimum(closest, np.sum((Y - centers[j]) ** 2, axis=1))
    return centers


def _move_gains(Y, labels, centers, counts):
    """Objective change of moving each point to each other cluster (single-point moves).

    Leaving cluster ``a`` saves ``n_a/(n_a-1) ||x - m_a||^2``; joining ``b`` costs
    ``n_b/(n_b+1) ||x - m_b||^2``. Points alone in their cluster cannot move.
    """
    d2 = _sq_dists(Y, centers)
    own = counts[labels].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        leave = np.where(own > 1, own / (own - 1) * d2[np.arange(len(Y)), labels], -np.inf)
    join = counts / (counts + 1.0) * d2
    delta = join - leave[:, None]
    delta[np.arange(len(Y)), labels] = np.inf
    return delta


def _hartigan(Y, labels, centers, c, max_passes):
    """Refine a Lloyd fixed point with improving single-point moves.

    Every fixed point of this refinement is also a Lloyd fixed point, and each
    move strictly lowers the objective.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=c).astype(np.float64)
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, Y)
    centers = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centers)
    scale = max(float(np.sum(Y * Y)), 1e-300)
    for _ in range(max_passes):
        delta = _move_gains(Y, labels, centers, counts)
        if not np.any(delta < -1e-12 * scale):
            break
        for i in np.flatnonzero(np.min(delta, axis=1) < -1e-12 * scale):
            a = labels[i]
            if counts[a] <= 1:
                continue
            x = Y[i]
            gain_out = counts[a] / (counts[a] - 1) * np.sum((x - centers[a]) ** 2)
            cost_in = counts / (counts + 1.0) * np.sum((x - centers) ** 2, axis=1)
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] - gain_out >= -1e-12 * scale:
                continue
            sums[a] -= x
            sums[b] += x
            counts[a] -= 1
            counts[b] += 1
            centers[a] = sums[a] / counts[a]
            centers[b] = sums[b] / counts[b]
            labels[i] = b
    return labels, centers


def _lloyd(Y, c, config, rng):
    centers = _kmeanspp(Y, c, rng)
    history = []
    for _ in range(config.max_iters):
        d2 = _sq_dists(Y, centers)
        labels = np.argmin(d2, axis=1)
        history.append(_objective(Y, centers, labels))
        new = centers.copy()
        counts = np.bincount(labels, minlength=c)
        for j in range(c):
            if counts[j]:
                new[j] = Y[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed each empty cluster at the point worst served by its center
            resid = np.sum((Y - new[labels]) ** 2, axis=1)
            for j in empty:
                far = int(np.argmax(resid))
                new[j] = Y[far]
                resid[far] = -1.0
        shift = np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift < config.tol:
            break
    labels = np.argmin(_sq_dists(Y, centers), axis=1)
    history.append(_objective(Y, centers, labels))
    labels, centers = _hartigan(Y, labels, centers, c, config.max_iters)
    objective = _objective(Y, centers, labels)
    history.append(objective)
    return labels, centers, objective, history


def kmeans(Y, config, workers=None):
    """k-means with k-means++ seeding and best-of-``restarts`` selection.

    Restart ``i`` uses its own RNG seeded by ``(config.seed, i)``. The
    restart with the lowest objective wins, earliest restart on ties.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = Y.shape[0]
    c = config.n_clusters
    if c > n:
        raise ClusterError(f"cannot form {c} clusters from {n} points")
    if not np.all(np.isfinite(Y)):
        raise ClusterError("embedding contains non-finite values")

    def run(i):
        return _lloyd(Y, c, config, make_rng(config.seed, i))

    n_workers = min(worker_count(workers), config.restarts)
    if n_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(n_workers) as pool:
            runs = list(pool.map(run, range(config.restarts)))
    else:
        runs = [run(i) for i in range(config.restarts)]
    objectives = [r[2] for r in runs]
    best = int(np.argmin(objectives))
    labels, centers, objective, history = runs[best]
    if len(np.unique(labels)) < c:
        warnings.warn(f"only {len(np.unique(labels))} of {c} clusters occupied", ClusterWarning)
    return ClusterAssignment(labels, objective, centers, history, objectives)


def _first_appearance(labels):
    mapping = {}
    return np.array([mapping.setdefault(int(x), len(mapping)) for x in labels], dtype=np.int64)


def agglomerative(Y, n_clusters=None, distance_threshold=None):
    """Average-linkage agglomerative clustering on Euclidean distance.

    Exactly one of ``n_clusters`` and ``distance_threshold`` is given. With a
    threshold, merging continues while the closest pair of clusters is no
    farther apart than the threshold. Among equally close pairs the one with
    the smallest ``(i, j)`` is merged, where a cluster is identified by its
    lowest member index. Labels are numbered by first appearance.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = Y.shape[0]
    if n < 2:
        raise ClusterError("agglomerative clustering needs at least 2 points")
    if (n_clusters is None) == (distance_threshold is None):
        raise ClusterError("give exactly one of n_clusters and distance_threshold")
    if n_clusters is not None and not 1 <= n_clusters <= n:
        raise ClusterError(f"n_clusters must lie in [1, {n}], got {n_clusters}")

    D = cdist(Y, Y)
    np.fill_diagonal(D, np.inf)
    active = np.ones(n, dtype=bool)
    size = np.ones(n, dtype=np.int64)
    owner = np.arange(n)
    # nn[i]: nearest active cluster with a larger index, nd[i]: its distance
    nn = np.full(n, -1, dtype=np.int64)
    nd = np.full(n, np.inf)

    def refresh(i):
        row = D[i, i + 1:].copy()
        row[~active[i + 1:]] = np.inf
        if row.size and np.isfinite(row).any():
            j = int(np.argmin(row))
            nn[i], nd[i] = i + 1 + j, row[j]
        else:
            nn[i], nd[i] = -1, np.inf

    for i in range(n - 1):
        refresh(i)
    merges = []
    clusters = n
    target = n_clusters if n_clusters is not None else 1
    while clusters > target:
        cand = np.where(active, nd, np.inf)
        i = int(np.argmin(cand))
        dist = cand[i]
        if not np.isfinite(dist):
            break
        if distance_threshold is not None and dist > distance_threshold:
            break
        j = int(nn[i])
        merged = (size[i] * D[i] + size[j] * D[j]) / (size[i] + size[j])
        size[i] += size[j]
        active[j] = False
        merged[~active] = np.inf
        merged[i] = np.inf
        D[i, :] = merged
        D[:, i] = merged
        D[j, :] = np.inf
        D[:, j] = np.inf
        owner[owner == j] = i
        merges.append((i, j, float(dist), int(size[i])))
        clusters -= 1
        refresh(i)
        below = np.flatnonzero(active[:i])
        stale = (nn[below] == i) | (nn[below] == j)
        for m in below[stale]:
            refresh(m)
        rest = below[~stale]
        d_new = D[rest, i]
        better = (d_new < nd[rest]) | ((d_new == nd[rest]) & (i < nn[rest]))
        nn[rest[better]] = i
        nd[rest[better]] = d_new[better]
        for m in np.flatnonzero(active[i + 1:j]) + i + 1:
            if nn[m] == j:
                refresh(m)

    if clusters == 1:
        warnings.warn("agglomerative clustering ended with a single cluster", ClusterWarning)
    return ClusterAssignment(_first_appearance(owner), merges=merges)


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def contingency(labels_a, labels_b):
    _, a = np.unique(np.asarray(labels_a), return_inverse=True)
    _, b = np.unique(np.asarray(labels_b), return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def nmi(labels_a, labels_b):
    """Normalized mutual information ``I(A;B) / sqrt(H(A) H(B))`` in nats.

    Two single-cluster labelings score 1; if only one of them is a single
    cluster the score is 0.
    """
    if len(labels_a) != len(labels_b):
        raise ClusterError(f"label lengths differ: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) == 0:
        raise ClusterError("empty labelings")
    table = contingency(labels_a, labels_b)
    n = table.sum()
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return float(min(1.0, max(0.0, mi / np.sqrt(ha * hb))))


def write_assignments(path, utterance_ids, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utterance_id", "predicted_label"])
        for uid, lab in zip(utterance_ids, labels):
            writer.writerow([uid, int(lab)])


def read_assignments(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [r["utterance_id"] for r in rows], np.array([int(r["predicted_label"]) for r in rows])


def evaluation_report(assignment, truth=None):
    return {
        "nmi": None if truth is None else nmi(truth, assignment.labels),
        "num_clusters": assignment.num_clusters,
        "objective": assignment.objective,
    }


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
