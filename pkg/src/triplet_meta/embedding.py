"""Soft ordinal embedding trained with a margin triplet loss.

Embeddings are plain (m, d) float arrays, row i being the coordinates of
study i. Training minimizes the hinge loss
``max(0, margin + ||xa - xp|| - ||xa - xn||)`` summed over mini-batches
with Adam, keeps first/second-moment state per embedding row (updated only
when a row is involved in the current batch), and retains the epoch with
the lowest fraction of violated triplets as the final solution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._util import read_json, write_json
from .errors import DivergenceError
from .triplets import TripletSet


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    init_scale: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    triplet_error: float


@dataclass(eq=False)
class TrainHistory:
    """Per-epoch metrics plus the retained best checkpoint.

    With zero configured epochs the record list is empty, best_epoch is None
    and best_coords are the initial coordinates.
    """

    m: int
    d: int
    config: TrainConfig
    records: list[EpochRecord]
    best_epoch: int | None
    best_coords: np.ndarray
    final_coords: np.ndarray

    @property
    def best_error(self) -> float | None:
        return None if self.best_epoch is None else self.records[self.best_epoch].triplet_error


def _check_vectors(*vectors: np.ndarray) -> list[np.ndarray]:
    out = [np.asarray(v, dtype=float) for v in vectors]
    dims = {v.shape for v in out}
    if len(dims) != 1:
        raise ValueError(f"vectors must share one shape, got {sorted(dims)}")
    for v in out:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite coordinates")
    return out


def triplet_loss(xa, xp, xn, margin: float = 1.0) -> float:
    """Hinge loss max(0, margin + ||xa-xp|| - ||xa-xn||) for one triplet."""
    xa, xp, xn = _check_vectors(xa, xp, xn)
    dap = float(np.linalg.norm(xa - xp))
    dan = float(np.linalg.norm(xa - xn))
    return max(0.0, margin + dap - dan)


def triplet_loss_grad(xa, xp, xn, margin: float = 1.0):
    """Subgradients of the hinge loss w.r.t. (xa, xp, xn).

    Inactive triplets (loss == 0, including exact kink equality) get zero
    gradients; a coincident pair contributes zero for its branch.
    """
    xa, xp, xn = _check_vectors(xa, xp, xn)
    dap_vec, dan_vec = xa - xp, xa - xn
    dap = float(np.linalg.norm(dap_vec))
    dan = float(np.linalg.norm(dan_vec))
    zeros = np.zeros_like(xa)
    if margin + dap - dan <= 0.0:
        return zeros, zeros.copy(), zeros.copy()
    uap = dap_vec / dap if dap > 0.0 else zeros
    uan = dan_vec / dan if dan > 0.0 else zeros
    return uap - uan, -uap, uan.copy()


def _distances(coords: np.ndarray, idx: np.ndarray):
    xa, xp, xn = coords[idx[:, 0]], coords[idx[:, 1]], coords[idx[:, 2]]
    dap = np.linalg.norm(xa - xp, axis=1)
    dan = np.linalg.norm(xa - xn, axis=1)
    return dap, dan


def _as_index_array(tset) -> np.ndarray:
    idx = tset.index_array() if isinstance(tset, TripletSet) else \
        np.asarray(tset, dtype=np.int64).reshape(-1, 3)
    return idx


def triplet_error(coords: np.ndarray, tset) -> float:
    """Fraction of triplets with ||xa-xp|| >= ||xa-xn|| (ties count as violations)."""
    idx = _as_index_array(tset)
    if len(idx) == 0:
        raise ValueError("triplet set is empty")
    coords = np.asarray(coords, dtype=float)
    dap, dan = _distances(coords, idx)
    return float(np.mean(dap >= dan))


def _evaluate(coords: np.ndarray, idx: np.ndarray, margin: float):
    with np.errstate(over="ignore", invalid="ignore"):  # divergence -> caller raises
        dap, dan = _distances(coords, idx)
        losses = np.maximum(0.0, margin + dap - dan)
        return float(losses.mean()), float(np.mean(dap >= dan))


def _batch_gradient(coords: np.ndarray, batch: np.ndarray, margin: float):
    """Summed triplet gradients over one batch and the rows it involves."""
    a, p, n = batch[:, 0], batch[:, 1], batch[:, 2]
    with np.errstate(over="ignore", invalid="ignore"):  # divergence detected at epoch end
        dap_vec = coords[a] - coords[p]
        dan_vec = coords[a] - coords[n]
        dap = np.linalg.norm(dap_vec, axis=1)
        dan = np.linalg.norm(dan_vec, axis=1)
        active = (margin + dap - dan) > 0.0

        uap = np.zeros_like(dap_vec)
        uan = np.zeros_like(dan_vec)
        np.divide(dap_vec, dap[:, None], out=uap, where=dap[:, None] > 0.0)
        np.divide(dan_vec, dan[:, None], out=uan, where=dan[:, None] > 0.0)

        grad = np.zeros_like(coords)
        np.add.at(grad, a[active], uap[active] - uan[active])
        np.add.at(grad, p[active], -uap[active])
        np.add.at(grad, n[active], uan[active])
    return grad, np.unique(batch)


def train(tset, m: int, d: int, cfg: TrainConfig = TrainConfig()) -> TrainHistory:
    """Fit an (m, d) embedding to a triplet set.

    Coordinates start i.i.d. normal(0, init_scale^2) from the seed. Each
    epoch reshuffles the triplets (same RNG stream), walks batches of
    batch_size, and applies one Adam step per batch to exactly the rows the
    batch involves; rows outside a batch are untouched, as is their moment
    state. Loss (mean per triplet) and triplet error over the full set are
    recorded at each epoch end.
    """
    idx = _as_index_array(tset)
    if len(idx) == 0:
        raise ValueError("triplet set is empty")
    if idx.min() < 0 or idx.max() >= m:
        raise ValueError(f"triplet indices out of range for m={m}")
    if d < 1:
        raise ValueError("d must be >= 1")

    rng = np.random.default_rng(cfg.seed)
    coords = rng.normal(0.0, cfg.init_scale, size=(m, d))
    mom1 = np.zeros_like(coords)
    mom2 = np.zeros_like(coords)
    steps = np.zeros(m, dtype=np.int64)

    records: list[EpochRecord] = []
    best_epoch: int | None = None
    best_error = np.inf
    best_coords = coords.copy()

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(idx))
        for start in range(0, len(idx), cfg.batch_size):
            batch = idx[perm[start:start + cfg.batch_size]]
            grad, touched = _batch_gradient(coords, batch, cfg.margin)

            steps[touched] += 1
            t = steps[touched][:, None].astype(float)
            g = grad[touched]
            mom1[touched] = cfg.beta1 * mom1[touched] + (1.0 - cfg.beta1) * g
            mom2[touched] = cfg.beta2 * mom2[touched] + (1.0 - cfg.beta2) * g * g
            m_hat = mom1[touched] / (1.0 - cfg.beta1 ** t)
            v_hat = mom2[touched] / (1.0 - cfg.beta2 ** t)
            coords[touched] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)

        mean_loss, error = _evaluate(coords, idx, cfg.margin)
        if not np.isfinite(mean_loss) or not np.all(np.isfinite(coords)):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch} "
                f"(learning_rate={cfg.learning_rate}); reduce the learning rate")
        records.append(EpochRecord(epoch, mean_loss, error))
        if error < best_error:
            best_error = error
            best_epoch = epoch
            best_coords = coords.copy()

    return TrainHistory(m=m, d=d, config=cfg, records=records,
                        best_epoch=best_epoch, best_coords=best_coords,
                        final_coords=coords)


def save_embedding(history: TrainHistory, path: str | Path) -> None:
    """Write embedding.json; ``coords`` is the retained best checkpoint."""
    write_json(path, {
        "m": history.m,
        "d": history.d,
        "config": asdict(history.config),
        "coords": history.best_coords,
        "history": [{"epoch": r.epoch, "mean_loss": r.mean_loss,
                     "triplet_error": r.triplet_error} for r in history.records],
        "best_epoch": history.best_epoch,
    })


def load_embedding(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read embedding.json; returns (coords, full document)."""
    doc = read_json(path)
    coords = np.asarray(doc["coords"], dtype=float).reshape(doc["m"], doc["d"])
    return coords, doc
