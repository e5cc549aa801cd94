"""Synthetic planted-structure datasets shared by the test suite.

Builds m studies in three characteristic-defined groups. Group 0 is the
tight, homogeneous one: compact in characteristic space and with zero
between-study variance in its true effects; groups 1 and 2 carry real
heterogeneity. Categoricals are group-pure and within-group texture comes
from smooth numeric variation, so between-group dissimilarity stays
clearly above within-group dissimilarity.
"""

from __future__ import annotations

import numpy as np

from triplet_meta.dataset import Characteristic, CharacteristicSpec, Dataset, Study

GROUP_SIZES = (14, 22, 22)  # m = 58, group 0 is the tight one

_SCHEMA = (
    CharacteristicSpec("mean_age", "numeric"),
    CharacteristicSpec("followup_years", "numeric"),
    CharacteristicSpec("design", "categorical"),
    CharacteristicSpec("setting", "categorical"),
)

# per-group characteristic profiles: numeric (center, sd), group-pure categories.
# group 0 is nearly point-like so it stays one cluster as k grows; groups 1
# and 2 have wide internal spreads and absorb the extra splits.
_PROFILES = {
    0: {"age": (4.5, 0.15), "follow": (1.0, 0.1),
        "design": "prospective", "setting": "tertiary"},
    1: {"age": (8.0, 0.9), "follow": (4.0, 0.7),
        "design": "retrospective", "setting": "regional"},
    2: {"age": (12.5, 0.9), "follow": (8.0, 0.7),
        "design": "registry", "setting": "national"},
}

# per-group true effects: (mean, between-study sd)
_EFFECTS = {0: (-0.9, 0.0), 1: (0.1, 0.45), 2: (0.4, 0.45)}


def make_planted(m: int = 58, seed: int = 7, sizes: tuple[int, ...] | None = None,
                 effect_tau2: dict[int, float] | None = None):
    """Return (Dataset, group labels array)."""
    if sizes is None:
        base = np.full(3, m // 3)
        base[: m - base.sum()] += 1
        sizes = tuple(int(x) for x in base)
    assert sum(sizes) == m
    rng = np.random.default_rng(seed)

    studies = []
    labels = []
    counter = 0
    for g, size in enumerate(sizes):
        mu, tau = _EFFECTS[g]
        if effect_tau2 is not None:
            tau = float(np.sqrt(effect_tau2[g]))
        prof = _PROFILES[g]
        for _ in range(size):
            counter += 1
            sid = f"S{counter:03d}"
            age = rng.normal(*prof["age"])
            follow = rng.normal(*prof["follow"])
            variance = float(rng.uniform(0.02, 0.08))
            true_effect = mu + tau * rng.standard_normal()
            effect = float(true_effect + np.sqrt(variance) * rng.standard_normal())
            chars = (
                Characteristic("mean_age", "numeric", float(age)),
                Characteristic("followup_years", "numeric", float(follow)),
                Characteristic("design", "categorical", prof["design"]),
                Characteristic("setting", "categorical", prof["setting"]),
            )
            studies.append(Study(sid, effect, variance, chars))
            labels.append(g)

    return Dataset(tuple(studies), _SCHEMA), np.array(labels)


def dataset_to_csv(ds: Dataset, path) -> None:
    """Write a planted dataset as an ingestible CSV with annotated kinds."""
    lines = ["id,effect,variance," + ",".join(
        f"{s.name}:{s.kind}" for s in ds.schema)]
    for s in ds.studies:
        values = []
        for c in s.characteristics:
            values.append("" if c.value is None else str(c.value))
        lines.append(f"{s.id},{s.effect},{s.variance}," + ",".join(values))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
