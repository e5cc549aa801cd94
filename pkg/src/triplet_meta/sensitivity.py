"""Robustness grid over triplet-subset seeds, triplet multiplier, embedding
dimension and cluster count, with numeric stability summaries.

Whole-partition agreement across seeds is quantified with the adjusted Rand
index; persistence of a single reference cluster across settings is
quantified by best-Jaccard matching. The reference cluster is taken from
the grid's first cell (first seed/lambda/dim/k): the pooled cluster with
the lowest estimated between-study variance, i.e. the most homogeneous one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import write_json
from .clustering import ClusterAssignment, adjusted_rand_index, kmeans, save_clusters
from .dataset import Dataset
from .embedding import TrainConfig, TrainHistory, save_embedding, train
from .meta import SubgroupReport, save_meta, subgroup_analysis
from .triplets import BudgetParams, TripletSet, subsample, triplet_budget


@dataclass
class GridSpec:
    seeds: list[int] = field(default_factory=lambda: [20, 50, 100])
    lambdas: list[int] = field(default_factory=lambda: [1, 2, 4])
    dims: list[int] = field(default_factory=lambda: [2, 5, 10])
    ks: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    log_base: str = "natural"
    train: TrainConfig = field(default_factory=TrainConfig)
    cluster_seed: int = 0
    restarts: int = 10
    max_iter: int = 300
    tol: float = 0.0
    level: float = 0.95

    def __post_init__(self):
        for name in ("seeds", "lambdas", "dims", "ks"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")


@dataclass(eq=False)
class CellResult:
    seed: int
    lam: int
    dim: int
    k: int
    status: str = "ok"                     # "ok" | "failed"
    error: str | None = None
    triplet_count: int | None = None
    best_triplet_error: float | None = None
    labels: np.ndarray | None = None
    tau2_per_cluster: dict[int, float | None] | None = None
    history: TrainHistory | None = None
    assignment: ClusterAssignment | None = None
    meta_report: SubgroupReport | None = None

    @property
    def name(self) -> str:
        return f"seed{self.seed}_lambda{self.lam}_d{self.dim}_k{self.k}"


@dataclass
class StableClusterSummary:
    reference: dict                 # {"seed","lambda","dim","k","cluster"}
    per_assignment: list[dict]      # {"jaccard","matched_cluster", cell key...}
    core_indices: list[int]         # studies present in every matched cluster


@dataclass
class SensitivityReport:
    cells: list[CellResult]
    ari: list[dict]                 # per (lambda, dim, k): seeds + pairwise matrix
    stable: StableClusterSummary | None


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def stable_clusters(assignments: list[ClusterAssignment],
                    reference_cluster: int) -> StableClusterSummary:
    """Track one cluster of assignments[0] through every other assignment.

    For each other assignment the best-Jaccard matching cluster is reported
    (ties to the lowest label); core_indices are the studies shared by the
    reference cluster and every match.
    """
    if len(assignments) < 2:
        raise ValueError("need at least 2 assignments")
    sizes = {len(a.labels) for a in assignments}
    if len(sizes) != 1:
        raise ValueError(f"assignments cover different study counts: {sorted(sizes)}")
    ref = assignments[0]
    ref_set = {int(i) for i in np.flatnonzero(np.asarray(ref.labels) == reference_cluster)}
    if not ref_set:
        raise ValueError(f"reference cluster {reference_cluster} is empty")

    matches: list[dict] = []
    core = set(ref_set)
    for pos, ca in enumerate(assignments[1:], start=1):
        labels = np.asarray(ca.labels)
        best_j, best_label, best_set = -1.0, None, set()
        for lbl in range(ca.k):
            members = {int(i) for i in np.flatnonzero(labels == lbl)}
            j = _jaccard(ref_set, members)
            if j > best_j:
                best_j, best_label, best_set = j, lbl, members
        matches.append({"assignment": pos, "jaccard": best_j,
                        "matched_cluster": best_label})
        core &= best_set
    return StableClusterSummary(
        reference={"cluster": reference_cluster},
        per_assignment=matches,
        core_indices=sorted(core))


def _reference_cluster(report: SubgroupReport) -> int | None:
    """The pooled cluster with the lowest tau^2 (ties to the lowest label)."""
    best: tuple[float, int] | None = None
    for j in sorted(report.per_cluster):
        t = report.per_cluster[j].tau2
        if best is None or t < best[0]:
            best = (t, j)
    return None if best is None else best[1]


def run_grid(ds: Dataset, pool: TripletSet, spec: GridSpec) -> SensitivityReport:
    """Run every (seed, lambda, dim, k) cell; failures are isolated per cell.

    Training is shared across the k values of a (seed, lambda, dim) triple.
    The subsample uses the cell's seed directly; the training seed comes from
    the base train config, so only the triplet subset varies across seeds.
    """
    m = ds.m
    cells: list[CellResult] = []
    trained: dict[tuple[int, int, int], tuple[TripletSet, TrainHistory] | str] = {}

    for seed in spec.seeds:
        for lam in spec.lambdas:
            for dim in spec.dims:
                budget = triplet_budget(BudgetParams(m, dim, lam, spec.log_base))
                key = (seed, lam, dim)
                if budget > len(pool):
                    trained[key] = (f"budget {budget} exceeds pool size {len(pool)}; "
                                    f"a pool of at least {budget} triplets is required")
                else:
                    sub = subsample(pool, budget, seed)
                    history = train(sub, m, dim, spec.train)
                    trained[key] = (sub, history)

                for k in spec.ks:
                    cell = CellResult(seed=seed, lam=lam, dim=dim, k=k)
                    outcome = trained[key]
                    if isinstance(outcome, str):
                        cell.status, cell.error = "failed", outcome
                        cells.append(cell)
                        continue
                    sub, history = outcome
                    ca = kmeans(history.best_coords, k, seed=spec.cluster_seed,
                                restarts=spec.restarts, max_iter=spec.max_iter,
                                tol=spec.tol)
                    report = subgroup_analysis(ds, ca, spec.level)
                    tau2s: dict[int, float | None] = {
                        j: (report.per_cluster[j].tau2 if j in report.per_cluster else None)
                        for j in range(k)}
                    cell.triplet_count = len(sub)
                    cell.best_triplet_error = history.best_error
                    cell.labels = ca.labels
                    cell.tau2_per_cluster = tau2s
                    cell.history = history
                    cell.assignment = ca
                    cell.meta_report = report
                    cells.append(cell)

    by_key = {(c.seed, c.lam, c.dim, c.k): c for c in cells}

    ari_blocks: list[dict] = []
    for lam in spec.lambdas:
        for dim in spec.dims:
            for k in spec.ks:
                seed_cells = [by_key[(s, lam, dim, k)] for s in spec.seeds]
                matrix: list[list[float | None]] = []
                for ca_i in seed_cells:
                    row: list[float | None] = []
                    for ca_j in seed_cells:
                        if ca_i.status == "ok" and ca_j.status == "ok":
                            row.append(adjusted_rand_index(ca_i.labels, ca_j.labels))
                        else:
                            row.append(None)
                    matrix.append(row)
                ari_blocks.append({"lambda": lam, "dim": dim, "k": k,
                                   "seeds": list(spec.seeds), "matrix": matrix})

    stable = None
    ref_cell = by_key[(spec.seeds[0], spec.lambdas[0], spec.dims[0], spec.ks[0])]
    if ref_cell.status == "ok":
        ref_label = _reference_cluster(ref_cell.meta_report)
        others = [c for c in cells
                  if c.status == "ok" and c is not ref_cell]
        if ref_label is not None and others:
            summary = stable_clusters(
                [ref_cell.assignment] + [c.assignment for c in others], ref_label)
            summary.reference = {"seed": ref_cell.seed, "lambda": ref_cell.lam,
                                 "dim": ref_cell.dim, "k": ref_cell.k,
                                 "cluster": ref_label}
            for match, cell in zip(summary.per_assignment, others):
                match.update({"seed": cell.seed, "lambda": cell.lam,
                              "dim": cell.dim, "k": cell.k})
                del match["assignment"]
            stable = summary

    return SensitivityReport(cells=cells, ari=ari_blocks, stable=stable)


def report_to_dict(report: SensitivityReport, ds: Dataset) -> dict:
    ids = ds.ids
    cells = []
    for c in report.cells:
        cells.append({
            "seed": c.seed, "lambda": c.lam, "dim": c.dim, "k": c.k,
            "status": c.status, "error": c.error,
            "triplet_count": c.triplet_count,
            "best_triplet_error": c.best_triplet_error,
            "labels": ({ids[i]: int(lbl) for i, lbl in enumerate(c.labels)}
                       if c.labels is not None else None),
            "tau2_per_cluster": ({str(j): t for j, t in c.tau2_per_cluster.items()}
                                 if c.tau2_per_cluster is not None else None),
            "dir": f"cells/{c.name}" if c.status == "ok" else None,
        })
    stable = None
    if report.stable is not None:
        stable = {
            "reference": report.stable.reference,
            "per_cell": report.stable.per_assignment,
            "core_ids": [ids[i] for i in report.stable.core_indices],
        }
    return {"cells": cells, "ari": report.ari, "stable": stable}


def save_sensitivity(report: SensitivityReport, ds: Dataset,
                     out_dir: str | Path) -> None:
    """Write sensitivity.json plus one artifact subdirectory per successful cell."""
    out_dir = Path(out_dir)
    for c in report.cells:
        if c.status != "ok":
            continue
        cell_dir = out_dir / "cells" / c.name
        cell_dir.mkdir(parents=True, exist_ok=True)
        save_embedding(c.history, cell_dir / "embedding.json")
        save_clusters(c.assignment, ds.ids, cell_dir / "clusters.json")
        save_meta(c.meta_report, cell_dir / "meta.json")
    write_json(out_dir / "sensitivity.json", report_to_dict(report, ds))
