"""k-means partitioning of study embeddings, elbow curve, partition agreement.

Lloyd's algorithm with squared Euclidean distance and k-means++ seeding,
run over several restarts; the restart with the lowest within-cluster sum
of squares wins (ties to the earlier restart). Assignment ties go to the
lowest center index and empty clusters are repaired by reseeding at the
point farthest from its assigned center, so every cluster index stays
populated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import read_json, write_json


@dataclass(eq=False)
class ClusterAssignment:
    """A k-way partition: labels per study, centers, and the achieved WCSS."""

    labels: np.ndarray          # (m,) ints in [0, k)
    centers: np.ndarray         # (k, d)
    wcss: float
    k: int
    seed: int
    restarts: int
    iteration_wcss: list[float] = field(default_factory=list)  # best restart's trace


@dataclass
class ElbowCurve:
    """Best WCSS per candidate k plus an advisory (never auto-applied) knee."""

    entries: list[tuple[int, float]]
    advisory_knee: int | None


def _wcss(points: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(((points - centers[labels]) ** 2).sum())


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return (diff ** 2).sum(axis=2)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; degenerates to uniform picks when all D^2 mass is zero."""
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=float)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centers[j] = points[pick]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int,
           tol: float) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    n, k = len(points), len(centers)
    labels = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iter):
        dist = _squared_distances(points, centers)
        new_labels = dist.argmin(axis=1)  # argmin takes the lowest index on ties

        # repair empty clusters: reseed at the point farthest from its center
        counts = np.bincount(new_labels, minlength=k)
        if (counts == 0).any():
            own = dist[np.arange(n), new_labels].copy()
            for j in np.flatnonzero(counts == 0):
                far = int(own.argmax())
                centers[j] = points[far]
                new_labels[far] = j
                own[far] = -np.inf
            dist = _squared_distances(points, centers)

        shift = 0.0
        for j in range(k):
            members = points[new_labels == j]
            updated = members.mean(axis=0)
            shift = max(shift, float(np.linalg.norm(updated - centers[j])))
            centers[j] = updated
        trace.append(_wcss(points, new_labels, centers))

        converged = (new_labels == labels).all() or shift <= tol
        labels = new_labels
        if converged:
            break
    return labels, centers, _wcss(points, labels, centers), trace


def kmeans(coords: np.ndarray, k: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 300, tol: float = 0.0) -> ClusterAssignment:
    """Best-of-restarts k-means; deterministic given (coords, k, seed, restarts)."""
    points = np.asarray(coords, dtype=float)
    if points.ndim != 2:
        raise ValueError("coords must be an (m, d) array")
    m = len(points)
    if not 1 <= k <= m:
        raise ValueError(f"k must satisfy 1 <= k <= m={m}, got {k}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")

    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, np.ndarray, float, list[float]] | None = None
    for _ in range(restarts):
        centers = _kmeanspp(points, k, rng)
        labels, centers, wcss, trace = _lloyd(points, centers, max_iter, tol)
        if best is None or wcss < best[2]:
            best = (labels, centers, wcss, trace)
    labels, centers, wcss, trace = best
    return ClusterAssignment(labels=labels, centers=centers, wcss=wcss,
                             k=k, seed=seed, restarts=restarts,
                             iteration_wcss=trace)


def elbow_curve(coords: np.ndarray, k_min: int, k_max: int, seed: int = 0,
                restarts: int = 10, max_iter: int = 300,
                tol: float = 0.0) -> ElbowCurve:
    """Best WCSS for each k in [k_min, k_max] plus the advisory knee.

    The knee is the k with the largest second difference of the WCSS curve;
    it is advisory only (cluster count for analyses comes from configuration).
    """
    m = len(np.asarray(coords))
    if not 1 <= k_min <= k_max <= m:
        raise ValueError(f"need 1 <= k_min <= k_max <= m={m}, "
                         f"got k_min={k_min}, k_max={k_max}")
    entries = [(k, kmeans(coords, k, seed=seed, restarts=restarts,
                          max_iter=max_iter, tol=tol).wcss)
               for k in range(k_min, k_max + 1)]
    knee = None
    if len(entries) >= 3:
        wcss = [w for _, w in entries]
        second = [wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1]
                  for i in range(1, len(wcss) - 1)]
        knee = entries[1 + int(np.argmax(second))][0]
    return ElbowCurve(entries=entries, advisory_knee=knee)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions of the same studies."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if len(a) != len(b):
        raise ValueError(f"label vectors differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n == 0:
        raise ValueError("label vectors are empty")

    _, a_codes = np.unique(a, return_inverse=True)
    _, b_codes = np.unique(b, return_inverse=True)
    contingency = np.zeros((a_codes.max() + 1, b_codes.max() + 1), dtype=np.int64)
    np.add.at(contingency, (a_codes, b_codes), 1)

    def comb2(x):
        return x * (x - 1) // 2

    index = int(comb2(contingency).sum())
    sum_rows = int(comb2(contingency.sum(axis=1)).sum())
    sum_cols = int(comb2(contingency.sum(axis=0)).sum())
    pairs = comb2(n)
    expected = sum_rows * sum_cols / pairs if pairs else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:  # both partitions trivial (all-one-cluster or all-singletons)
        return 1.0
    return float((index - expected) / (max_index - expected))


def save_clusters(ca: ClusterAssignment, ids, path: str | Path) -> None:
    """Write clusters.json with labels keyed by study id."""
    write_json(path, {
        "k": ca.k,
        "seed": ca.seed,
        "restarts": ca.restarts,
        "labels": {sid: int(lbl) for sid, lbl in zip(ids, ca.labels)},
        "centers": ca.centers,
        "wcss": ca.wcss,
    })


def load_clusters(path: str | Path, ids) -> ClusterAssignment:
    doc = read_json(path)
    labels = np.array([doc["labels"][sid] for sid in ids], dtype=np.int64)
    return ClusterAssignment(
        labels=labels, centers=np.asarray(doc["centers"], dtype=float),
        wcss=float(doc["wcss"]), k=int(doc["k"]), seed=int(doc["seed"]),
        restarts=int(doc["restarts"]))


def save_elbow(curve: ElbowCurve, path: str | Path) -> None:
    write_json(path, {
        "entries": [{"k": k, "wcss": w} for k, w in curve.entries],
        "advisory_knee": curve.advisory_knee,
    })
