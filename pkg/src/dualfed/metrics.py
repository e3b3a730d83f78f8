"""Evaluation metrics: accuracy, class-wise separation, linear CKA, plus
the per-round metrics table and representation dumps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateGeometryError,
    DegenerateVectorError,
    UndefinedMetricError,
)
from .model import ModelParams, encode, project
from .tensor import EVAL, Tensor

_DEGENERATE_DISTANCE = 1e-12


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def accuracy(labels_pred, labels_true) -> float:
    """Fraction of equal entries."""
    pred = np.asarray(labels_pred)
    true = np.asarray(labels_true)
    if pred.shape != true.shape:
        raise UndefinedMetricError(
            f"label arrays disagree: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise UndefinedMetricError("accuracy of an empty label set")
    return float(np.mean(pred == true))


def _cosine_distance_matrix(reps: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("zero-norm representation row")
    n = reps / norms
    cos = np.clip(n @ n.T, -1.0, 1.0)
    return 1.0 - cos


def class_separation(reps, labels) -> float:
    """1 - (mean within-class cosine distance / mean overall cosine distance).

    0 means classes are as spread as the whole cloud; 1 means each class
    collapsed to a ray while the cloud did not.
    """
    reps = _as_array(reps)
    labels = np.asarray(labels)
    n = reps.shape[0]
    if n < 2:
        raise UndefinedMetricError("separation needs at least 2 points")
    dist = _cosine_distance_matrix(reps)
    upper = np.triu_indices(n, k=1)
    d_total = float(dist[upper].mean())
    same = labels[:, None] == labels[None, :]
    within_mask = same[upper]
    if not within_mask.any():
        raise UndefinedMetricError("no same-class pair; separation undefined")
    if d_total < _DEGENERATE_DISTANCE:
        raise DegenerateGeometryError("all points coincide; separation undefined")
    d_within = float(dist[upper][within_mask].mean())
    return 1.0 - d_within / d_total


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two paired representation sets.

    Columns are centered internally; the score is invariant to orthogonal
    transforms and isotropic scaling of either argument and lies in [0, 1].
    """
    x = _as_array(x)
    y = _as_array(y)
    if x.shape[0] != y.shape[0]:
        raise UndefinedMetricError(
            f"CKA needs paired samples, got {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise UndefinedMetricError("CKA needs at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = float(np.linalg.norm(yc.T @ xc) ** 2)
    nx = float(np.linalg.norm(xc.T @ xc))
    ny = float(np.linalg.norm(yc.T @ yc))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateGeometryError("zero-variance input; CKA undefined")
    return cross / (nx * ny)


STAGE_PRE = "pre"
STAGE_POST = "post"


def client_representations(params: ModelParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """Eval-mode (z, u) for one model on a shared input batch."""
    z = encode(params, x, EVAL)
    u = project(params, z, EVAL)
    return z, u


def cross_client_cka(models: Sequence[ModelParams], probe: Tensor,
                     stage: str) -> float:
    """Mean pairwise CKA of client representations on a shared probe set."""
    if stage not in (STAGE_PRE, STAGE_POST):
        raise ValueError(f"stage must be 'pre' or 'post', got {stage!r}")
    if len(models) < 2:
        raise UndefinedMetricError("cross-client CKA needs >= 2 clients")
    reps = []
    for params in models:
        z, u = client_representations(params, probe)
        reps.append((z if stage == STAGE_PRE else u).data)
    scores = []
    for i in range(len(reps)):
        for j in range(i + 1, len(reps)):
            scores.append(linear_cka(reps[i], reps[j]))
    return float(np.mean(scores))


# -- per-round metrics table ------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    """One evaluated round: accuracies per path, geometry, and comm cost."""

    round: int
    acc_global: tuple[float, ...]
    acc_personal: tuple[float, ...]
    acc_ensemble: tuple[float, ...]
    sep_z: tuple[float, ...]
    sep_u: tuple[float, ...]
    mean_cka_z: float
    mean_cka_u: float
    comm_bytes: int

    @property
    def mean_acc_global(self) -> float:
        return float(np.mean(self.acc_global))

    @property
    def mean_acc_personal(self) -> float:
        return float(np.mean(self.acc_personal))

    @property
    def mean_acc_ensemble(self) -> float:
        return float(np.mean(self.acc_ensemble))


class MetricsTable:
    """Append-only per-round table with basic sanity checks on append."""

    def __init__(self, num_clients: int):
        self.num_clients = num_clients
        self.rows: list[MetricsRow] = []

    def append(self, row: MetricsRow) -> None:
        for field in (row.acc_global, row.acc_personal, row.acc_ensemble,
                      row.sep_z, row.sep_u):
            if len(field) != self.num_clients:
                raise DataError("metrics row does not cover every client")
        for acc in row.acc_global + row.acc_personal + row.acc_ensemble:
            if not 0.0 <= acc <= 1.0:
                raise DataError(f"accuracy out of range: {acc}")
        for cka in (row.mean_cka_z, row.mean_cka_u):
            if not -1e-9 <= cka <= 1.0 + 1e-9:
                raise DataError(f"CKA out of range: {cka}")
        if self.rows and row.comm_bytes < self.rows[-1].comm_bytes:
            raise DataError("communication bytes must be nondecreasing")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def best_mean_ensemble(self) -> float:
        if not self.rows:
            raise UndefinedMetricError("no evaluated rounds")
        return max(r.mean_acc_ensemble for r in self.rows)

    def header(self) -> list[str]:
        m = self.num_clients
        cols = ["round", "mean_acc_global", "mean_acc_personal", "mean_acc_ensemble"]
        cols += [f"acc_global_c{i}" for i in range(m)]
        cols += [f"acc_personal_c{i}" for i in range(m)]
        cols += [f"acc_ensemble_c{i}" for i in range(m)]
        cols += [f"sep_z_c{i}" for i in range(m)]
        cols += [f"sep_u_c{i}" for i in range(m)]
        cols += ["mean_cka_z", "mean_cka_u", "comm_bytes"]
        return cols

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for r in self.rows:
                row = [r.round,
                       repr(r.mean_acc_global), repr(r.mean_acc_personal),
                       repr(r.mean_acc_ensemble)]
                row += [repr(v) for v in r.acc_global]
                row += [repr(v) for v in r.acc_personal]
                row += [repr(v) for v in r.acc_ensemble]
                row += [repr(v) for v in r.sep_z]
                row += [repr(v) for v in r.sep_u]
                row += [repr(r.mean_cka_z), repr(r.mean_cka_u), r.comm_bytes]
                writer.writerow(row)


def read_metrics_csv(path: str) -> tuple[list[str], list[list[float]]]:
    """Header plus numeric rows, for figures and recomputation checks."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, rows


# -- representation dumps ----------------------------------------------------

def dump_representations(params: ModelParams, features: Tensor,
                         labels: np.ndarray, path: str) -> None:
    """Write eval-mode (label, z, u) rows under an `N,k,d,C` header line."""
    z, u = client_representations(params, features)
    n = features.rows
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([n, z.cols, u.cols, params.arch.num_classes])
        for i in range(n):
            row = [int(labels[i])]
            row += [repr(float(v)) for v in z.data[i]]
            row += [repr(float(v)) for v in u.data[i]]
            writer.writerow(row)


def load_representations(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Inverse of dump_representations; returns (labels, z, u, meta)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        n, k, d, c = (int(v) for v in next(reader))
        labels = np.empty(n, dtype=np.int64)
        z = np.empty((n, k))
        u = np.empty((n, d))
        for i, row in enumerate(reader):
            labels[i] = int(row[0])
            z[i] = [float(v) for v in row[1:1 + k]]
            u[i] = [float(v) for v in row[1 + k:1 + k + d]]
    return labels, z, u, {"N": n, "k": k, "d": d, "C": c}
