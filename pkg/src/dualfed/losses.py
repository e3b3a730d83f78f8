"""Training losses: classification cross-entropy and the supervised
contrastive term that shapes the post-projection space.

All losses return their analytic gradient alongside the scalar so callers
can chain them into the layer backward passes without an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmallError, DegenerateVectorError, LabelError
from .model import ForwardTrace
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Temperature for the contrastive term and its weight in stage 1."""

    tau: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def check_one_hot(y: Tensor) -> None:
    data = y.data
    if not np.all((data == 0.0) | (data == 1.0)):
        raise LabelError("labels must be exactly 0/1")
    if not np.all(data.sum(axis=1) == 1.0):
        raise LabelError("each label row must have exactly one 1")


def labels_from_one_hot(y: Tensor) -> np.ndarray:
    check_one_hot(y)
    return np.argmax(y.data, axis=1)


def cross_entropy(pred: Tensor, y: Tensor) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class.

    `pred` is a softmax output. The returned gradient is taken with respect
    to the logits that produced it (the fused softmax/cross-entropy form),
    which is what the trainers chain into the layer backward passes.
    """
    check_one_hot(y)
    if pred.shape != y.shape:
        raise LabelError(f"pred is {pred.shape} but labels are {y.shape}")
    b = pred.rows
    p = np.clip(pred.data, PROB_FLOOR, 1.0)
    loss = float(-(y.data * np.log(p)).sum() / b)
    grad_logits = (pred.data - y.data) / b
    return loss, grad_logits


def sup_con_loss(u: Tensor, labels: np.ndarray,
                 tau: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over one batch of representations.

    Pairs of rows are compared by cosine similarity scaled by 1/tau. Each
    anchor is pulled toward the other rows of its own class and pushed away
    from everything else in the batch. Anchors whose class appears only
    once have no positive set and are skipped; if every anchor is skipped
    the loss is 0 with a zero gradient.

    Returns the scalar loss and its gradient with respect to u.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    b = u.rows
    if b < 2:
        raise BatchTooSmallError(f"contrastive loss needs >= 2 rows, got {b}")
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise LabelError(f"expected {b} labels, got shape {labels.shape}")

    norms = np.linalg.norm(u.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("zero-norm representation in batch")
    n = u.data / norms

    positives = (labels[:, None] == labels[None, :])
    np.fill_diagonal(positives, False)
    pos_counts = positives.sum(axis=1)
    anchors = pos_counts > 0
    k = int(anchors.sum())
    if k == 0:
        return 0.0, np.zeros_like(u.data)

    sim = (n @ n.T) / tau
    off_diag = ~np.eye(b, dtype=bool)
    # row-wise logsumexp over the off-diagonal entries
    masked = np.where(off_diag, sim, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    exp = np.where(off_diag, np.exp(masked - row_max), 0.0)
    log_z = row_max.reshape(-1) + np.log(exp.sum(axis=1))

    mean_pos_sim = np.zeros(b)
    mean_pos_sim[anchors] = (
        (sim * positives).sum(axis=1)[anchors] / pos_counts[anchors])
    loss = float((log_z[anchors] - mean_pos_sim[anchors]).mean())

    # d(loss)/d(sim): softmax over denominators minus the positive average
    p = exp / exp.sum(axis=1, keepdims=True)
    g_sim = np.zeros_like(sim)
    g_sim[anchors] = (p[anchors]
                      - positives[anchors] / pos_counts[anchors, None]) / k
    g_n = ((g_sim + g_sim.T) @ n) / tau
    # through the row normalization: project out the radial component
    g_u = (g_n - (g_n * n).sum(axis=1, keepdims=True) * n) / norms
    return loss, g_u


def stage1_loss(trace: ForwardTrace, y: Tensor, cfg: LossConfig) -> float:
    """Local-path cross-entropy plus the weighted contrastive term."""
    ce, _ = cross_entropy(trace.y_p, y)
    if cfg.lam == 0.0:
        return ce
    con, _ = sup_con_loss(trace.u, labels_from_one_hot(y), cfg.tau)
    return ce + cfg.lam * con
