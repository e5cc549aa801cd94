"""Triplet pool construction, retention budget and seeded subsampling.

Every study acts once per draw as an anchor; unordered candidate pairs are
sampled from the remaining studies and an oracle decides which candidate is
more similar. The number of triplets kept for training is
``ceil(lambda * m * d * log(m))`` with a configurable logarithm base, and a
seeded uniform subsample of the pool realizes that budget.
"""

from __future__ import annotations

import json
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ._util import atomic_write_text
from .dataset import Dataset
from .errors import DataError
from .oracle import TripletJudgment

LOG_BASES = {"natural": math.e, "base2": 2.0, "base10": 10.0}


@dataclass(frozen=True)
class Triplet:
    """(anchor, positive, negative) study indices plus the oracle's judgment."""

    anchor: int
    positive: int
    negative: int
    judgment: TripletJudgment

    def __post_init__(self):
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise ValueError(
                f"triplet indices must be pairwise distinct: "
                f"({self.anchor}, {self.positive}, {self.negative})")

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.anchor, self.positive, self.negative)


@dataclass
class TripletSet:
    """Ordered triplets with provenance (full pool or a seeded subsample)."""

    triplets: tuple[Triplet, ...]
    seed: int | None = None
    source: str = "pool"

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def index_array(self):
        """(n, 3) int array of (anchor, positive, negative) rows."""
        import numpy as np

        return np.array([t.key for t in self.triplets], dtype=np.int64).reshape(-1, 3)


@dataclass(frozen=True)
class BudgetParams:
    """Inputs to the retained-triplet count: lambda * m * d * log(m)."""

    m: int
    d: int
    lam: int
    log_base: str = "natural"

    def __post_init__(self):
        if self.m < 3:
            raise ValueError(f"m must be >= 3 to form a triplet, got {self.m}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.lam < 1:
            raise ValueError(f"lambda must be >= 1, got {self.lam}")
        if self.log_base not in LOG_BASES:
            raise ValueError(f"log_base must be one of {sorted(LOG_BASES)}, "
                             f"got {self.log_base!r}")


def triplet_budget(params: BudgetParams) -> int:
    """ceil(lambda * m * d * log(m)) in the configured base (natural by default)."""
    log_m = math.log(params.m, LOG_BASES[params.log_base])
    return math.ceil(params.lam * params.m * params.d * log_m)


def generate_pool(ds: Dataset, oracle, pairs_per_anchor: int = 50,
                  seed: int = 0) -> TripletSet:
    """Build the triplet pool by judging sampled candidate pairs per anchor.

    For each anchor (in dataset order) ``pairs_per_anchor`` unordered pairs
    are drawn uniformly without replacement from the other studies, then sent
    to the oracle. The distance-wise closer candidate becomes the positive.
    Output order is fixed by (anchor index, draw index) so the set is
    deterministic given (seed, oracle). Exact duplicates are dropped after
    judging.
    """
    m = ds.m
    if m < 3:
        raise ValueError(f"dataset must contain at least 3 studies, got {m}")
    if pairs_per_anchor < 1:
        raise ValueError("pairs_per_anchor must be positive")

    max_pairs = math.comb(m - 1, 2)
    if pairs_per_anchor > max_pairs:
        warnings.warn(
            f"pairs_per_anchor={pairs_per_anchor} exceeds the {max_pairs} distinct "
            f"pairs available per anchor; capping", UserWarning, stacklevel=2)
        pairs_per_anchor = max_pairs

    rng = random.Random(seed)
    jobs: list[tuple[int, int, int]] = []  # (anchor, i, j) with i < j
    for a in range(m):
        others = [i for i in range(m) if i != a]
        pairs = [(others[p], others[q])
                 for p in range(len(others)) for q in range(p + 1, len(others))]
        for i, j in rng.sample(pairs, pairs_per_anchor):
            jobs.append((a, i, j))

    studies = ds.studies
    triples = [(studies[a], studies[i], studies[j]) for a, i, j in jobs]
    if hasattr(oracle, "judge_many"):
        judgments = oracle.judge_many(triples)
    else:
        judgments = [oracle.judge(*t) for t in triples]

    out: list[Triplet] = []
    seen: set[tuple[int, int, int]] = set()
    for (a, i, j), judgment in zip(jobs, judgments):
        pos, neg = (i, j) if judgment.more_similar == "A" else (j, i)
        key = (a, pos, neg)
        if key in seen:
            continue
        seen.add(key)
        out.append(Triplet(a, pos, neg, judgment))
    return TripletSet(tuple(out), seed=seed, source="pool")


def subsample(pool: TripletSet, budget: int, seed: int) -> TripletSet:
    """Seeded uniform subset of the pool with exactly ``budget`` triplets."""
    if budget < 1:
        raise ValueError("budget must be positive")
    if budget > len(pool):
        raise ValueError(
            f"budget {budget} exceeds pool size {len(pool)}; regenerate the pool "
            f"with a larger pairs_per_anchor")
    rng = random.Random(seed)
    chosen = rng.sample(list(pool.triplets), budget)
    return TripletSet(tuple(chosen), seed=seed, source="subsample")


def save_triplets(tset: TripletSet, ds: Dataset, path: str | Path) -> None:
    """Write triplets.jsonl: one JSON object per line, ids instead of indices."""
    ids = ds.ids
    lines = []
    for t in tset.triplets:
        lines.append(json.dumps({
            "anchor_id": ids[t.anchor],
            "positive_id": ids[t.positive],
            "negative_id": ids[t.negative],
            "oracle_tag": t.judgment.oracle_tag,
            "explanation": t.judgment.explanation,
            "prompt_hash": t.judgment.prompt_hash,
        }, sort_keys=True, ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_triplets(path: str | Path, ds: Dataset,
                  source: str = "file") -> TripletSet:
    """Read triplets.jsonl back, mapping study ids to indices against ds."""
    triplets: list[Triplet] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"bad JSON on line {lineno}: {exc}") from exc
            a = ds.index_of(doc["anchor_id"])
            p = ds.index_of(doc["positive_id"])
            n = ds.index_of(doc["negative_id"])
            judgment = TripletJudgment(
                anchor_id=doc["anchor_id"], candidate_a_id=doc["positive_id"],
                candidate_b_id=doc["negative_id"], more_similar="A",
                explanation=doc.get("explanation", ""),
                oracle_tag=doc.get("oracle_tag", "unknown"),
                prompt_hash=doc.get("prompt_hash"))
            triplets.append(Triplet(a, p, n, judgment))
    return TripletSet(tuple(triplets), seed=None, source=source)
