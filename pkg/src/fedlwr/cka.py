"""Linear centered kernel alignment between two feature matrices.

Given feature matrices U (n x z1) and V (n x z2) computed on the same n
samples, similarity is the normalized Hilbert-Schmidt independence
criterion of their Gram matrices:

    score = HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L)),
    HSIC(K, L) = vec(K') . vec(L') / (n - 1)^2,

where K = U U^T, L = V V^T and K', L' are the double-centered Grams. The
biased estimator (divisor (n-1)^2) is used throughout. A per-sample cosine
variant is provided for the ablation strategy that swaps out CKA.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .network import FeatureMatrix

CKA_LINEAR = "cka_linear"
COSINE_MEAN = "cosine_mean"

# Threshold on HSIC(K,K) * HSIC(L,L) below which features are treated as
# constant and the score is flagged degenerate instead of dividing by ~0.
DEGENERATE_HSIC_PRODUCT = 1e-24


@dataclass(frozen=True)
class SimilarityScore:
    """A similarity in [0, 1]. ``degenerate`` marks constant-feature inputs
    whose value (pinned to 1.0) carries no information; callers decide the
    fallback."""

    value: float
    method: str
    degenerate: bool = False


def _as_feature_matrix(mat: FeatureMatrix, name: str, min_rows: int = 2) -> np.ndarray:
    arr = np.asarray(mat, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (samples x features), got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} samples, got {arr.shape[0]}")
    return arr


def gram(features: FeatureMatrix) -> np.ndarray:
    """K = U U^T, symmetrized so K == K.T holds bitwise."""
    arr = _as_feature_matrix(features, "features")
    raw = arr @ arr.T
    return (raw + raw.T) * 0.5


def center_gram(k: np.ndarray) -> np.ndarray:
    """Double-center: K' = H K H with H = I - (1/n) 11^T."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"gram matrix must be square, got shape {k.shape}")
    if k.shape[0] < 2:
        raise ValueError("gram matrix needs n >= 2")
    col_means = k.mean(axis=0)
    row_means = k.mean(axis=1)
    grand = k.mean()
    return k - col_means[None, :] - row_means[:, None] + grand


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimator: vec(K') . vec(L') / (n - 1)^2."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape:
        raise ValueError(f"gram matrices must match, got {k.shape} and {l.shape}")
    n = k.shape[0]
    kc = center_gram(k)
    lc = center_gram(l)
    return float(np.sum(kc * lc)) / float((n - 1) ** 2)


def cka(u: FeatureMatrix, v: FeatureMatrix) -> SimilarityScore:
    """Linear CKA similarity between two feature matrices on the same samples.

    Feature dimensions may differ. When either side has (numerically)
    constant features the score is returned with ``degenerate=True`` rather
    than dividing by a vanishing normalizer.
    """
    u = _as_feature_matrix(u, "first feature matrix")
    v = _as_feature_matrix(v, "second feature matrix")
    if u.shape[0] != v.shape[0]:
        raise ValueError(f"sample counts differ: {u.shape[0]} vs {v.shape[0]}")
    k = gram(u)
    l = gram(v)
    cross = hsic(k, l)
    self_k = hsic(k, k)
    self_l = hsic(l, l)
    norm_sq = self_k * self_l
    if norm_sq <= DEGENERATE_HSIC_PRODUCT:
        return SimilarityScore(1.0, CKA_LINEAR, degenerate=True)
    value = cross / float(np.sqrt(norm_sq))
    if not np.isfinite(value):
        raise NumericError("CKA produced a non-finite score")
    return SimilarityScore(float(np.clip(value, 0.0, 1.0)), CKA_LINEAR)


def cosine_mean(u: FeatureMatrix, v: FeatureMatrix) -> SimilarityScore:
    """Mean per-sample cosine similarity, affine-mapped from [-1, 1] to [0, 1].

    Zero-vector rows contribute a raw cosine of 0 (mapping to 0.5), which
    keeps the downstream weight conversion well-defined.
    """
    u = _as_feature_matrix(u, "first feature matrix", min_rows=1)
    v = _as_feature_matrix(v, "second feature matrix", min_rows=1)
    if u.shape != v.shape:
        raise ValueError(f"feature matrices must match, got {u.shape} and {v.shape}")
    norms_u = np.linalg.norm(u, axis=1)
    norms_v = np.linalg.norm(v, axis=1)
    dots = np.sum(u * v, axis=1)
    ok = (norms_u > 0.0) & (norms_v > 0.0)
    cosines = np.zeros(u.shape[0], dtype=np.float64)
    cosines[ok] = dots[ok] / (norms_u[ok] * norms_v[ok])
    mapped = (float(cosines.mean()) + 1.0) / 2.0
    if not np.isfinite(mapped):
        raise NumericError("cosine similarity produced a non-finite score")
    return SimilarityScore(float(np.clip(mapped, 0.0, 1.0)), COSINE_MEAN)
