"""Independent reference implementations used as test oracles.

These deliberately avoid the library's vectorized code paths: the
contrastive-loss oracle enumerates every (anchor, positive, candidate)
term with scalar math, and the CKA oracle goes through centered Gram
matrices (the HSIC formulation) instead of feature-space products.
"""

import math

import numpy as np


def max_rel_err(a, b, floor=1e-8, rel_floor=0.0):
    """Entrywise relative error with a floor.

    rel_floor, when set, additionally floors the denominator at that
    fraction of the largest entry, so central-difference noise on entries
    orders of magnitude below the dominant gradient is not misread as
    analytic error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)),
                       max(floor, rel_floor * scale))
    return float(np.max(np.abs(a - b) / denom))


def supcon_bruteforce(u, labels, tau):
    """Term-by-term contrastive loss over a batch.

    For each anchor i with a nonempty positive set A(i), accumulate
    -log(exp(s_ij)/sum_a exp(s_ia)) averaged over j in A(i); the outer
    average runs over anchors that have positives. Cosine similarity over
    tau throughout.
    """
    u = np.asarray(u, dtype=np.float64)
    labels = np.asarray(labels)
    b = u.shape[0]

    def cos(i, j):
        return float(u[i] @ u[j] / (np.linalg.norm(u[i]) * np.linalg.norm(u[j])))

    total = 0.0
    counted = 0
    for i in range(b):
        positives = [j for j in range(b) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        counted += 1
        denom = sum(math.exp(cos(i, a) / tau) for a in range(b) if a != i)
        inner = 0.0
        for j in positives:
            inner += -math.log(math.exp(cos(i, j) / tau) / denom)
        total += inner / len(positives)
    if counted == 0:
        return 0.0
    return total / counted


def linear_cka_hsic(x, y):
    """Linear CKA via centered Gram matrices: HSIC(K,L)/sqrt(HSIC(K,K)HSIC(L,L))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n

    def hsic(k, l):
        return float(np.sum((h @ k @ h) * (h @ l @ h)))

    k = x @ x.T
    l = y @ y.T
    return hsic(k, l) / math.sqrt(hsic(k, k) * hsic(l, l))


def nearest_prototype_labels(features, prototypes):
    """1-nearest-prototype classification by Euclidean distance."""
    d2 = ((features[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)
