"""Latent-space analysis: PCA over priors and correlation with warp volume change."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import metrics


def _as_matrix(priors):
    rows = [np.asarray(getattr(p, "array", p), dtype=np.float64).ravel() for p in priors]
    if len(rows) < 2:
        raise ValueError("PCA needs at least 2 priors")
    if len({r.size for r in rows}) != 1:
        raise ValueError("priors have different lengths")
    return np.stack(rows)


@dataclass
class PcaResult:
    components: np.ndarray  # (k, L), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,)
    projected: np.ndarray  # (n, k)
    mean: np.ndarray  # (L,)
    zero_variance: bool = False

    def reconstruct(self, projected=None):
        p = self.projected if projected is None else projected
        return self.mean + p @ self.components

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "explained_variance_ratio"])
        for i, r in enumerate(self.explained_variance_ratio):
            w.writerow([i + 1, f"{r:.8g}"])
        return buf.getvalue()


def pca(priors, k=2):
    """Mean-centred PCA via SVD; each component's largest-magnitude entry is positive."""
    X = _as_matrix(priors)
    n, L = X.shape
    if not 1 <= k <= min(L, n):
        raise ValueError(f"k={k} must lie in [1, {min(L, n)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    zero = bool(total <= 1e-30 * max(1.0, float(np.abs(X).max()) ** 2))
    comps = vt[:k].copy()
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    ratio = np.zeros(k) if zero else var[:k] / total
    return PcaResult(comps, ratio, Xc @ comps.T, mean, zero)


def pearson(a, b):
    """(r, zero_variance); r is reported as 0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"pearson: need two equal-length vectors, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    scale = max(1.0, np.abs(a).max()) * 1e-12, max(1.0, np.abs(b).max()) * 1e-12
    if sa <= scale[0] or sb <= scale[1]:
        return 0.0, True
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0)), False


@dataclass
class CorrelationResult:
    r: np.ndarray  # per component
    zero_variance: np.ndarray  # per component flag
    mean_det: np.ndarray  # per subject
    pca: PcaResult
    subject_ids: list = field(default_factory=list)

    def best_component(self):
        return int(np.argmax(np.abs(self.r)))

    def scatter_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.pca.projected.shape[1]
        w.writerow(["subject"] + [f"pc{i + 1}" for i in range(k)] + ["mean_jacobian_det"])
        for sid, p, d in zip(self.subject_ids, self.pca.projected, self.mean_det):
            w.writerow([sid] + [f"{x:.8g}" for x in p] + [f"{d:.8g}"])
        return buf.getvalue()


def masked_mean_det(field, grid, mask=None):
    return metrics.jacobian_stats(field, grid, mask).mean_det


def latent_jacobian_correlation(priors, fields=None, grid=None, mask=None, k=2, mean_det=None):
    """Pearson r between the first ``k`` PC scores and each subject's masked mean Jacobian determinant.

    Either pass ``fields`` (one per prior) with a ``grid`` and optional ``mask``
    (a single array or one per subject), or precomputed ``mean_det`` values.
    """
    if mean_det is None:
        if fields is None or grid is None:
            raise ValueError("need fields and a grid, or precomputed mean determinants")
        if len(fields) != len(priors):
            raise ValueError(f"{len(fields)} fields for {len(priors)} priors")
        masks = mask if isinstance(mask, (list, tuple)) else [mask] * len(fields)
        mean_det = [masked_mean_det(f, grid, m) for f, m in zip(fields, masks)]
    mean_det = np.asarray(mean_det, dtype=np.float64)
    if mean_det.size != len(priors):
        raise ValueError("one mean determinant per prior required")
    res = pca(priors, k)
    rs, flags = zip(*(pearson(res.projected[:, i], mean_det) for i in range(k)))
    ids = [getattr(p, "subject_id", str(i)) or str(i) for i, p in enumerate(priors)]
    return CorrelationResult(np.array(rs), np.array(flags), mean_det, res, ids)
