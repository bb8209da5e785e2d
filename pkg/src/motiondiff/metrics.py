"""Diversity and accuracy metrics for sets of predicted futures.

Samples are ``[N, f, J, 3]``, ground truth ``[f, J, 3]``. ADE sums per-frame
Euclidean norms (over all J*3 coordinates of a frame) and divides by f, so it
reads as a mean per-frame displacement.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import PredictionSet

CSV_COLUMNS = ["obs_id", "APD", "ADE", "FDE", "MMADE", "MMFDE"]


@dataclass
class EvalRecord:
    obs_id: str
    APD: float
    ADE: float
    FDE: float
    MMADE: float
    MMFDE: float


def _samples(Z) -> np.ndarray:
    if isinstance(Z, PredictionSet):
        return Z.samples
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 4:
        raise ValueError(f"samples must be [N, f, J, 3], got {Z.shape}")
    return Z


def _check_gt(Z: np.ndarray, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape != Z.shape[1:]:
        raise ValueError(f"shape mismatch: samples {Z.shape[1:]} vs ground truth {X.shape}")
    return X


def apd(Z) -> float:
    Z = _samples(Z)
    N = Z.shape[0]
    if N < 2:
        raise ValueError("APD needs at least 2 samples")
    flat = Z.reshape(N, -1)
    dist = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    return float(dist.sum() / (N * (N - 1)))


def ade(Z, X) -> float:
    Z = _samples(Z)
    X = _check_gt(Z, X)
    f = X.shape[0]
    per_frame = np.linalg.norm((Z - X).reshape(Z.shape[0], f, -1), axis=-1)
    return float(per_frame.sum(axis=1).min() / f)


def fde(Z, X) -> float:
    Z = _samples(Z)
    X = _check_gt(Z, X)
    last = np.linalg.norm((Z[:, -1] - X[-1]).reshape(Z.shape[0], -1), axis=-1)
    return float(last.min())


def build_multimodal_groups(observations: Sequence[np.ndarray], delta: float = 0.5) -> list[list[int]]:
    """For each observation, indices of all observations whose last observed
    frame lies within ``delta`` (Euclidean, over J*3 coordinates)."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    last = np.stack([np.asarray(o, dtype=np.float64)[-1].reshape(-1) for o in observations])
    dist = np.linalg.norm(last[:, None] - last[None], axis=-1)
    return [list(np.flatnonzero(row < delta)) for row in dist]


def mmade(Z, futures: Sequence[np.ndarray]) -> float:
    return float(np.mean([ade(Z, g) for g in futures]))


def mmfde(Z, futures: Sequence[np.ndarray]) -> float:
    return float(np.mean([fde(Z, g) for g in futures]))


def evaluate_sets(pred_sets: Sequence[PredictionSet], observations: Sequence[np.ndarray],
                  futures: Sequence[np.ndarray], delta: float = 0.5) -> list[EvalRecord]:
    groups = build_multimodal_groups(observations, delta)
    records = []
    for i, Z in enumerate(pred_sets):
        gt = [futures[g] for g in groups[i]]
        records.append(EvalRecord(Z.obs_id, apd(Z), ade(Z, futures[i]), fde(Z, futures[i]),
                                  mmade(Z, gt), mmfde(Z, gt)))
    return records


def mean_record(records: Sequence[EvalRecord]) -> EvalRecord:
    names = [f.name for f in fields(EvalRecord)][1:]
    return EvalRecord("mean", *(float(np.mean([getattr(r, n) for r in records])) for n in names))


def write_eval_csv(path, records: Sequence[EvalRecord]) -> None:
    rows = list(records) + [mean_record(records)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            obs, *vals = astuple(r)
            w.writerow([obs] + [f"{v:.6f}" for v in vals])
    tmp.replace(path)
