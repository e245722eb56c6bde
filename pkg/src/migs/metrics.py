"""Distribution distances between feature sets: FID, KID and PRD F-scores."""
from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.cluster import KMeans

log = logging.getLogger(__name__)


def _check_pair(X, Y, minimum: int, what: str):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature matrices must be [N, d] with equal d, got {X.shape} and {Y.shape}")
    if len(X) < minimum or len(Y) < minimum:
        raise ValueError(f"{what} needs at least {minimum} samples per side, got {len(X)} and {len(Y)}")
    return X, Y


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The trace of the cross term is computed as the trace of the symmetric square root of
    sqrt(C1) C2 sqrt(C1), which has the same eigenvalues as C1 C2.
    """
    s1 = _psd_sqrt(cov1)
    cross = s1 @ cov2 @ s1
    w = np.linalg.eigvalsh(0.5 * (cross + cross.T))
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid(X, Y) -> float:
    X, Y = _check_pair(X, Y, 2, "FID")
    d = X.shape[1]
    if len(X) < d or len(Y) < d:
        warnings.warn(f"FID with fewer samples ({len(X)}, {len(Y)}) than feature dimensions ({d})", stacklevel=2)
    cov_x = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    cov_y = np.atleast_2d(np.cov(Y, rowvar=False, ddof=1))
    return frechet_distance(X.mean(0), cov_x, Y.mean(0), cov_y)


def polynomial_kernel(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = A.shape[1]
    return (A @ B.T / d + 1.0) ** 3


def mmd2_unbiased(X: np.ndarray, Y: np.ndarray) -> float:
    m, n = len(X), len(Y)
    kxx = polynomial_kernel(X, X)
    kyy = polynomial_kernel(Y, Y)
    kxy = polynomial_kernel(X, Y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid_blocks(X, Y, block_size: int = 100) -> np.ndarray:
    """Unbiased MMD^2 on each pair of aligned contiguous blocks."""
    X, Y = _check_pair(X, Y, 2, "KID")
    n_blocks = max(1, min(len(X), len(Y)) // block_size)
    xs = np.array_split(X, n_blocks)
    ys = np.array_split(Y, n_blocks)
    return np.array([mmd2_unbiased(a, b) for a, b in zip(xs, ys)])


def kid(X, Y, block_size: int = 100) -> float:
    return float(kid_blocks(X, Y, block_size).mean())


def kid_with_stderr(X, Y, block_size: int = 100) -> tuple[float, float]:
    vals = kid_blocks(X, Y, block_size)
    if len(vals) < 2:
        return float(vals.mean()), float("nan")
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def prd_curve(eval_dist: np.ndarray, ref_dist: np.ndarray, num_angles: int = 1001, epsilon: float = 1e-10):
    """Precision/recall pairs for slopes tan(angle), angle swept over (0, pi/2)."""
    if not 3 <= num_angles <= 1e6:
        raise ValueError("num_angles must be in [3, 1e6]")
    angles = np.linspace(epsilon, np.pi / 2 - epsilon, num_angles)
    slopes = np.tan(angles)
    precision = np.minimum(ref_dist[None, :] * slopes[:, None], eval_dist[None, :]).sum(axis=1)
    recall = precision / slopes
    return np.clip(precision, 0.0, 1.0), np.clip(recall, 0.0, 1.0)


def f_beta(precision, recall, beta: float) -> np.ndarray:
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    denom = beta**2 * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (1 + beta**2) * precision * recall / denom
    return np.where(denom > 0, out, 0.0)


def cluster_histograms(X: np.ndarray, Y: np.ndarray, num_clusters: int, seed: int = 0):
    """Cluster X u Y jointly and return the per-set cluster frequency histograms.

    The union is put in a canonical row order first so that the clustering does not depend on
    which argument is which.
    """
    data = np.concatenate([X, Y])
    order = np.lexsort(data.T[::-1])
    km = KMeans(n_clusters=num_clusters, n_init=10, random_state=seed)
    labels_sorted = km.fit(data[order]).labels_
    labels = np.empty_like(labels_sorted)
    labels[order] = labels_sorted
    hx = np.bincount(labels[: len(X)], minlength=num_clusters) / len(X)
    hy = np.bincount(labels[len(X) :], minlength=num_clusters) / len(Y)
    return hx, hy


def prd_f_scores(X, Y, num_clusters: int = 20, num_angles: int = 1001, seed: int = 0) -> tuple[float, float]:
    """(F_8, F_1/8) of generated features ``Y`` against reference features ``X``.

    F_8 weights recall (coverage of the reference) and F_1/8 weights precision.
    """
    X, Y = _check_pair(X, Y, num_clusters, "PRD")
    ref_dist, eval_dist = cluster_histograms(X, Y, num_clusters, seed)
    precision, recall = prd_curve(eval_dist, ref_dist, num_angles)
    return float(f_beta(precision, recall, 8.0).max()), float(f_beta(precision, recall, 1.0 / 8.0).max())
