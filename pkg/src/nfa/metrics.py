"""Image similarity, segmentation overlap, surface distances and warp integrity.

Volumes are (ny, nx, nz) arrays; B-scans are the (ny, nx) planes indexed by
z. Volume-level numbers are means over per-B-scan values.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _same_shape(name, a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(a, b):
    """Mean absolute error in percent of the unit intensity range."""
    a, b = _same_shape("mae", a, b)
    return 100.0 * float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range=1.0):
    a, b = _same_shape("psnr", a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse))


def ssim_map(a, b, window=SSIM_WINDOW, data_range=1.0):
    """Local SSIM over valid ``window`` x ``window`` uniform windows."""
    a, b = _same_shape("ssim", a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim: expected a 2D image, got shape {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def box(x):
        f = ndimage.uniform_filter(x, size=window, mode="constant")
        r = window // 2
        return f[r:x.shape[0] - (window - 1 - r), r:x.shape[1] - (window - 1 - r)]

    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a ** 2
    var_b = box(b * b) - mu_b ** 2
    cov = box(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window=SSIM_WINDOW, data_range=1.0):
    """Mean windowed SSIM of two 2D images, in percent."""
    return 100.0 * float(np.mean(ssim_map(a, b, window, data_range)))


# ---------------------------------------------------------------------------
# overlap


def dice_per_class(pred, gt, classes):
    """Dice in percent for each class; NaN where both masks are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice: dims mismatch {pred.shape} vs {gt.shape}")
    out = {}
    for c in classes:
        a, b = pred == c, gt == c
        denom = int(a.sum()) + int(b.sum())
        out[int(c)] = np.nan if denom == 0 else 200.0 * np.logical_and(a, b).sum() / denom
    return out


def dice(pred, gt, classes):
    """(per-class dict, mean over classes that are non-empty in either input)."""
    per = dice_per_class(pred, gt, classes)
    vals = [v for v in per.values() if not np.isnan(v)]
    return per, (float(np.mean(vals)) if vals else np.nan)


def layer_classes(n_classes):
    """Layer classes: everything except background class 0."""
    return list(range(1, n_classes))


# ---------------------------------------------------------------------------
# surface distances


def boundary(mask):
    """Pixels of ``mask`` with at least one in-image face neighbour outside it."""
    m = np.asarray(mask, dtype=bool)
    edge = np.zeros_like(m)
    for ax in range(m.ndim):
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[ax], hi[ax] = slice(None, -1), slice(1, None)
        diff = m[tuple(lo)] != m[tuple(hi)]
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    return edge & m


def _directed(src, dst, spacing):
    """Distances from every ``src`` point to the nearest ``dst`` point."""
    dt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dt[src]


def surface_distances(pred_boundary, gt_boundary, spacing=(1.0, 1.0)):
    """(ASSD, HD) between two boundary masks; NaN pair if either is empty."""
    a = np.asarray(pred_boundary, dtype=bool)
    b = np.asarray(gt_boundary, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"surface distances: shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return np.nan, np.nan
    d_ab = _directed(a, b, spacing)
    d_ba = _directed(b, a, spacing)
    assd_v = (d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size)
    return float(assd_v), float(max(d_ab.max(), d_ba.max()))


def assd(pred_boundary, gt_boundary, spacing=(1.0, 1.0)):
    return surface_distances(pred_boundary, gt_boundary, spacing)[0]


def hd(pred_boundary, gt_boundary, spacing=(1.0, 1.0)):
    return surface_distances(pred_boundary, gt_boundary, spacing)[1]


def surface_distances_bruteforce(pred_boundary, gt_boundary, spacing=(1.0, 1.0)):
    """All-pairs reference for :func:`surface_distances`."""
    a = np.argwhere(pred_boundary) * np.asarray(spacing, dtype=np.float64)
    b = np.argwhere(gt_boundary) * np.asarray(spacing, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return np.nan, np.nan
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    d_ab, d_ba = d.min(1), d.min(0)
    return (float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size)),
            float(max(d_ab.max(), d_ba.max())))


def label_surface_distances(pred, gt, classes, spacing=(1.0, 1.0)):
    """Mean ASSD and HD over classes, using each class mask's border."""
    assds, hds = [], []
    for c in classes:
        a, h = surface_distances(boundary(pred == c), boundary(gt == c), spacing)
        if not np.isnan(a):
            assds.append(a)
            hds.append(h)
    if not assds:
        return np.nan, np.nan
    return float(np.mean(assds)), float(np.mean(hds))


# ---------------------------------------------------------------------------
# deformation integrity


def _warp_fn(field):
    if callable(field):
        return field
    if hasattr(field, "warp"):
        return field.warp
    raise TypeError("field must be callable or expose .warp(coords)")


def jacobian_determinants(field, grid):
    """Determinant of the warp Jacobian at the interior points of ``grid``.

    ``grid`` is an (ny, nx, nz, 3) array of coordinates on a regular lattice;
    derivatives are central differences between lattice neighbours.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4 or grid.shape[-1] != 3:
        raise ValueError(f"jacobian: expected (ny, nx, nz, 3) grid, got {grid.shape}")
    if min(grid.shape[:3]) < 3:
        raise ValueError(f"jacobian: grid {grid.shape[:3]} too small for central differences")
    warp = _warp_fn(field)
    phi = np.asarray(warp(grid.reshape(-1, 3)), dtype=np.float64).reshape(grid.shape)
    J = np.empty(tuple(s - 2 for s in grid.shape[:3]) + (3, 3))
    inner = (slice(1, -1),) * 3
    for ax in range(3):
        hi = list(inner)
        lo = list(inner)
        hi[ax], lo[ax] = slice(2, None), slice(None, -2)
        step = grid[tuple(hi)][..., ax] - grid[tuple(lo)][..., ax]
        if np.any(step <= 0):
            raise ValueError("jacobian: grid spacing must be positive along every axis")
        J[..., :, ax] = (phi[tuple(hi)] - phi[tuple(lo)]) / step[..., None]
    return np.linalg.det(J), phi, grid


@dataclass
class JacobianStats:
    neg_fraction: float  # percent of det <= 0
    mean_det: float
    mean_l1: float


def jacobian_stats(field, grid, mask=None):
    """Folding percentage, masked mean determinant and mean L1 displacement."""
    det, phi, grid = jacobian_determinants(field, grid)
    u = phi - grid
    mean_l1 = float(np.mean(np.abs(u).sum(-1)))
    neg = 100.0 * float(np.mean(det <= 0))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != grid.shape[:3]:
            raise ValueError(f"jacobian: mask {m.shape} does not match grid {grid.shape[:3]}")
        m = m[1:-1, 1:-1, 1:-1]
        mean_det = float(det[m].mean()) if m.any() else np.nan
    else:
        mean_det = float(det.mean())
    return JacobianStats(neg, mean_det, mean_l1)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-B-scan metric values plus their per-volume mean and std."""

    per_bscan: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    notes: str = "Dice means exclude classes empty in both prediction and reference."

    def mean(self, name):
        v = np.asarray(self.per_bscan[name], dtype=np.float64)
        return float(np.nanmean(v)) if np.any(~np.isnan(v)) else np.nan

    def std(self, name):
        v = np.asarray(self.per_bscan[name], dtype=np.float64)
        return float(np.nanstd(v)) if np.any(~np.isnan(v)) else np.nan

    def summary(self):
        return {k: (self.mean(k), self.std(k)) for k in self.per_bscan}

    def to_json(self):
        return json.dumps({"meta": self.meta, "notes": self.notes,
                           "per_bscan": {k: [None if np.isnan(x) else float(x) for x in v]
                                         for k, v in self.per_bscan.items()},
                           "summary": {k: {"mean": m, "std": s} for k, (m, s) in self.summary().items()}},
                          indent=1, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "std"])
        for k, (m, s) in self.summary().items():
            w.writerow([k, f"{m:.6g}", f"{s:.6g}"])
        return buf.getvalue()


def evaluate_bscans(pred, gt, pred_labels=None, gt_labels=None, n_classes=None, slices=None,
                    spacing_um=(1.0, 1.0), meta=None):
    """Metrics per B-scan z in ``slices`` (all by default).

    ``pred``/``gt`` are intensity volumes (either may be None to skip image
    metrics); label volumes enable Dice/ASSD/HD over layer classes.
    """
    ref = gt if gt is not None else gt_labels
    nz = np.asarray(ref).shape[2]
    slices = list(range(nz)) if slices is None else [int(s) for s in slices]
    rows = {}

    def put(k, v):
        rows.setdefault(k, []).append(v)

    for z in slices:
        if pred is not None and gt is not None:
            a, b = np.asarray(pred)[:, :, z], np.asarray(gt)[:, :, z]
            put("MAE", mae(a, b))
            put("PSNR", psnr(a, b))
            put("SSIM", ssim(a, b))
        if pred_labels is not None and gt_labels is not None:
            cls = layer_classes(n_classes)
            pl, gl = np.asarray(pred_labels)[:, :, z], np.asarray(gt_labels)[:, :, z]
            put("Dice", dice(pl, gl, cls)[1])
            a, h = label_surface_distances(pl, gl, cls, spacing_um)
            put("ASSD", a)
            put("HD", h)
    report = MetricReport({k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}, dict(meta or {}))
    report.meta["slices"] = slices
    return report
