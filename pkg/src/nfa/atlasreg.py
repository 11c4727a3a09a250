"""Joint implicit atlas construction and deformable registration.

A subject is seen through the warp ``phi_i(c) = c + u_i(c)``: the atlas
network evaluated at ``phi_i(c)`` should reproduce the subject's intensity
and labels at ``c``. Displacements come from one shared network modulated
per subject by its latent prior.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import diffmath as dm
from . import metrics
from .nets import DisplacementNet, LatentPrior, init_latent_reg
from .volio import LabelVolume, Volume, grid_coords

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


class VoxelBudgetError(MemoryError):
    pass


@dataclass
class RegLossWeights:
    alpha: float = 1.0  # segmentation
    beta: float = 0.01  # displacement L1 (training)
    gamma: float = 0.01  # displacement L1 (inference)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class RegTrainConfig:
    iters: int = 2000
    lr_displacement: float = 1e-5
    lr_atlas: float = 1e-6
    lr_latent: float = 1e-5
    lr_mult: float = 0.999
    coords_per_subject: int = 8192
    pretrain_epochs: int = 500
    pretrain_lr: float = 1e-4
    pretrain_batch: int = 8192
    infer_epochs: int = 100
    infer_lr: float = 5e-4
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        for k in ("iters", "coords_per_subject", "pretrain_epochs", "pretrain_batch", "infer_epochs"):
            if getattr(self, k) < 0 or (k != "pretrain_epochs" and getattr(self, k) == 0):
                raise ValueError(f"{k} must be positive")
        for k in ("lr_displacement", "lr_atlas", "lr_latent", "pretrain_lr", "infer_lr"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if not 0 < self.lr_mult <= 1:
            raise ValueError("lr_mult must lie in (0, 1]")


@dataclass
class RegSubject:
    """A subject volume, optionally acquired at a subset of slow-axis positions.

    ``slices`` lists the B-scan indices present; coordinates always refer to
    the full grid ``volume.dims`` so sparse and dense acquisitions share one
    coordinate frame.
    """

    volume: Volume
    labels: LabelVolume | None = None
    slices: tuple | None = None
    subject_id: str = ""

    def __post_init__(self):
        if self.labels is not None and self.labels.dims != self.volume.dims:
            raise ValueError(f"label dims {self.labels.dims} != volume dims {self.volume.dims}")
        nz = self.volume.dims[2]
        self.slices = tuple(range(nz)) if self.slices is None else tuple(sorted(int(z) for z in self.slices))
        if not self.slices or self.slices[0] < 0 or self.slices[-1] >= nz:
            raise ValueError(f"slices must lie in [0, {nz})")

    @property
    def dims(self):
        return self.volume.dims

    def grid(self):
        """Normalized coordinates of the acquired voxels, (ny, nx, n_slices, 3)."""
        return grid_coords(self.dims, z_positions=self.slices)

    def intensity(self):
        return self.volume.data[:, :, list(self.slices)]

    def label_array(self):
        return None if self.labels is None else self.labels.labels[:, :, list(self.slices)]


class DeformationField:
    """Closure over (displacement net, prior): ``u(c)`` and ``warp(c) = c + u(c)``."""

    def __init__(self, net: DisplacementNet | None, prior: LatentPrior | None, chunk=16384):
        self.net, self.prior, self.chunk = net, prior, chunk

    def u(self, coords):
        coords = np.asarray(coords)
        if self.net is None:
            return np.zeros(coords.shape, dtype=np.float64)
        dtype = self.net.dtype
        mods = self.net.modulations(self.prior)
        out = np.empty(coords.shape, dtype=dtype)
        for s in range(0, len(coords), self.chunk):
            c = coords[s:s + self.chunk].astype(dtype)
            out[s:s + self.chunk] = self.net.forward(c, self.prior, modulations=mods).data
        return out

    def warp(self, coords):
        coords = np.asarray(coords)
        return coords.astype(self.u(coords[:1]).dtype) + self.u(coords)

    __call__ = warp

    def on_grid(self, grid):
        g = np.asarray(grid)
        return self.u(g.reshape(-1, 3)).reshape(g.shape)


class IdentityField(DeformationField):
    def __init__(self):
        super().__init__(None, None)

    def warp(self, coords):
        return np.asarray(coords, dtype=np.float64).copy()

    __call__ = warp


class AffineField(DeformationField):
    """``c + c @ A + t`` with a 3x3 ``A`` and translation ``t``."""

    def __init__(self, A=None, t=None):
        super().__init__(None, None)
        self.A = dm.Tensor(np.zeros((3, 3)) if A is None else np.asarray(A, dtype=np.float64),
                           requires_grad=True, name="affine.A")
        self.t = dm.Tensor(np.zeros(3) if t is None else np.asarray(t, dtype=np.float64),
                           requires_grad=True, name="affine.t")

    def u_tensor(self, coords):
        c = coords if isinstance(coords, dm.Tensor) else dm.Tensor(np.asarray(coords, dtype=np.float64))
        return c @ self.A + self.t

    def u(self, coords):
        c = np.asarray(coords, dtype=np.float64)
        return c @ self.A.data + self.t.data

    def warp(self, coords):
        c = np.asarray(coords, dtype=np.float64)
        return c + self.u(c)

    __call__ = warp


# ---------------------------------------------------------------------------
# explicit atlas (ablation)


class ExplicitAtlas:
    """Atlas stored as parameter images sampled trilinearly.

    Channel 0 holds intensity logits, channels 1..C class logits; outputs go
    through the same sigmoid/softmax heads as the implicit atlas.
    """

    arch = "explicit-atlas"

    def __init__(self, n_classes, dims, max_voxels=2_000_000, dtype="float32"):
        n = int(np.prod(dims)) * (n_classes + 1)
        if n > max_voxels:
            raise VoxelBudgetError(f"explicit atlas needs {n} parameters, budget is {max_voxels}")
        self.n_classes, self.dims, self.dtype = n_classes, tuple(dims), np.dtype(dtype)
        self.params = {"grid": dm.Tensor(np.zeros(tuple(dims) + (n_classes + 1,), dtype=self.dtype),
                                         requires_grad=True, name="grid")}

    def forward(self, coords):
        c = coords if isinstance(coords, dm.Tensor) else dm.Tensor(np.asarray(coords, dtype=self.dtype))
        v = dm.grid_sample3d(self.params["grid"], c)
        recon = dm.sigmoid(v[:, 0:1]).reshape(-1)
        seg = dm.softmax(v[:, 1:], axis=1)
        return recon, seg

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.params["grid"].data).tobytes()).hexdigest()

    def n_params(self):
        return self.params["grid"].size


# ---------------------------------------------------------------------------
# sampling


def strided_sample(dims, target, rng, slices=None):
    """Random-phase strided sub-grid trimmed to ``target`` points.

    Returns (iy, ix, iz_pos) index arrays into the acquired grid. The stride
    is the largest one that still yields ``target`` points for any phase; the
    excess is dropped at random.
    """
    ny, nx, nzs = dims[0], dims[1], (dims[2] if slices is None else len(slices))
    s = 1
    while (ny // (s + 1)) * (nx // (s + 1)) * (nzs // (s + 1)) >= target:
        s += 1
    ys = np.arange(rng.integers(s), ny, s)
    xs = np.arange(rng.integers(s), nx, s)
    zs = np.arange(rng.integers(s), nzs, s)
    iy, ix, iz = (a.ravel() for a in np.meshgrid(ys, xs, zs, indexing="ij"))
    if len(iy) > target:
        keep = np.sort(rng.choice(len(iy), size=target, replace=False))
        iy, ix, iz = iy[keep], ix[keep], iz[keep]
    return iy, ix, iz


def _batch(subject: RegSubject, idx, dtype, n_classes):
    iy, ix, iz = idx
    g = subject.grid()
    coords = g[iy, ix, iz].astype(dtype)
    if np.any(np.abs(coords) > 1 + 1e-6):
        raise ValueError("coordinate batch exceeds the volume bounds")
    target = subject.intensity()[iy, ix, iz].astype(dtype)
    onehot = None
    lab = subject.label_array()
    if lab is not None:
        onehot = np.eye(n_classes, dtype=dtype)[lab[iy, ix, iz]]
    return coords, target, onehot


# ---------------------------------------------------------------------------
# pretraining


def median_targets(dataset):
    """Voxel-wise median intensity and modal label over the acquired B-scans."""
    if not dataset:
        raise ValueError("empty dataset")
    ref = dataset[0]
    for s in dataset:
        if s.dims != ref.dims or s.slices != ref.slices:
            raise ValueError(f"subject {s.subject_id!r}: grid differs from {ref.subject_id!r}")
    med = np.median(np.stack([s.intensity() for s in dataset]), axis=0)
    n_classes = ref.labels.n_classes
    counts = np.zeros(med.shape + (n_classes,), dtype=np.int32)
    for s in dataset:
        counts += np.eye(n_classes, dtype=np.int32)[s.label_array()]
    return med, counts.argmax(-1)


def atlas_pretrain(atlas, dataset, cfg: RegTrainConfig | None = None, weights: RegLossWeights | None = None,
                   epochs=None):
    """Fit the atlas to the voxel-wise median intensity and modal label."""
    cfg = cfg or RegTrainConfig()
    weights = weights or RegLossWeights()
    med, mode = median_targets(dataset)
    dtype = atlas.dtype
    coords = dataset[0].grid().reshape(-1, 3).astype(dtype)
    target = med.reshape(-1).astype(dtype)
    onehot = np.eye(atlas.n_classes, dtype=dtype)[mode.reshape(-1)]
    opt = dm.Adam(atlas.params, lr=cfg.pretrain_lr)
    rng = np.random.default_rng(cfg.seed)
    params = list(atlas.params.values())
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    hist = []
    for epoch in range(epochs):
        order = rng.permutation(len(coords))
        tot = 0.0
        for s in range(0, len(order), cfg.pretrain_batch):
            idx = order[s:s + cfg.pretrain_batch]
            with dm.Tape() as tape:
                r, sg = atlas.forward(coords[idx])
                loss = dm.square(r - target[idx]).mean() + weights.alpha * dm.binary_cross_entropy(sg, onehot[idx]).mean()
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"atlas pretraining diverged at epoch {epoch}")
            grads = tape.gradient(loss, params)
            opt.step(dict(zip(atlas.params, grads)))
            tot += loss.item() * len(idx)
        hist.append(tot / len(coords))
    return atlas, hist


# ---------------------------------------------------------------------------
# joint training


@dataclass
class RegTerms:
    mse: dm.Tensor
    seg: dm.Tensor
    disp: dm.Tensor
    total: dm.Tensor


def reg_loss(atlas, disp, prior, coords, target, onehot, weights: RegLossWeights, disp_weight):
    """Warped-atlas loss on one coordinate batch; ``seg``/``disp`` are weighted."""
    c = dm.Tensor(coords)
    u = disp.forward(c, prior)
    r, s = atlas.forward(c + u)
    mse = dm.square(r - target).mean()
    if onehot is not None and weights.alpha > 0:
        seg = weights.alpha * dm.binary_cross_entropy(s, onehot).mean()
    else:
        seg = dm.Tensor(np.zeros((), dtype=mse.dtype))
    l1 = dm.abs(u).sum(axis=1).mean()
    d = disp_weight * l1
    return RegTerms(mse, seg, d, mse + seg + d)


def joint_train(atlas, disp: DisplacementNet, dataset, cfg: RegTrainConfig | None = None,
                weights: RegLossWeights | None = None, priors=None, train_atlas=True, callback=None):
    """Optimize atlas, displacement/hypernetwork and priors together.

    One optimizer step per iteration on one subject (round-robin), using a
    random-phase strided subsample of its voxels. Returns (priors, history).
    """
    cfg = cfg or RegTrainConfig()
    weights = weights or RegLossWeights()
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    dtype = disp.dtype
    if priors is None:
        priors = [init_latent_reg(disp.L, rng, subject_id=s.subject_id or str(i), dtype=dtype)
                  for i, s in enumerate(dataset)]
    opt_disp = dm.Adam(disp.params, lr=cfg.lr_displacement, decay=cfg.lr_mult)
    opt_atlas = dm.Adam(atlas.params, lr=cfg.lr_atlas, decay=cfg.lr_mult) if train_atlas else None
    opt_lat = [dm.Adam({"prior": p.values}, lr=cfg.lr_latent, decay=cfg.lr_mult) for p in priors]
    dparams = list(disp.params.values())
    aparams = list(atlas.params.values()) if train_atlas else []
    history = []
    t0 = time.perf_counter()
    for it in range(cfg.iters):
        i = it % len(dataset)
        subj, prior = dataset[i], priors[i]
        idx = strided_sample(subj.dims, cfg.coords_per_subject, rng, subj.slices)
        coords, target, onehot = _batch(subj, idx, dtype, atlas.n_classes)
        with dm.Tape() as tape:
            terms = reg_loss(atlas, disp, prior, coords, target, onehot, weights, weights.beta)
        total = terms.total.item()
        if not np.isfinite(total):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}, subject {i}")
        grads = tape.gradient(terms.total, dparams + aparams + [prior.values])
        nd, na = len(dparams), len(aparams)
        opt_disp.step(dict(zip(disp.params, grads[:nd])))
        if train_atlas:
            opt_atlas.step(dict(zip(atlas.params, grads[nd:nd + na])))
        opt_lat[i].step({"prior": grads[-1]})
        # the LR multiplier applies per iteration to the shared groups and
        # per visit to each subject's prior
        opt_disp.end_epoch()
        if train_atlas:
            opt_atlas.end_epoch()
        opt_lat[i].end_epoch()
        row = dict(iter=it, subject=i, mse=terms.mse.item(), seg=terms.seg.item(),
                   disp=terms.disp.item(), total=total)
        history.append(row)
        if callback is not None:
            callback(row)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("reg iter %d loss %.5f (%.1fs)", it, total, time.perf_counter() - t0)
    return priors, history


def reg_infer_latent(atlas, disp: DisplacementNet, subject: RegSubject, cfg: RegTrainConfig | None = None,
                     weights: RegLossWeights | None = None, prior=None):
    """Fit a new subject's prior with atlas and displacement nets frozen.

    Minimizes MSE + gamma * mean |u|_1; labels are not used.
    """
    cfg = cfg or RegTrainConfig()
    weights = weights or RegLossWeights()
    before = (atlas.checksum(), disp.checksum())
    rng = np.random.default_rng(cfg.seed)
    if prior is None:
        prior = init_latent_reg(disp.L, rng, subject_id=subject.subject_id, dtype=disp.dtype)
    if len(prior) != disp.L:
        raise dm.ShapeError(f"prior length {len(prior)} != displacement-net latent size {disp.L}")
    opt = dm.Adam({"prior": prior.values}, lr=cfg.infer_lr)
    no_labels = RegSubject(subject.volume, None, subject.slices, subject.subject_id)
    hist = []
    for epoch in range(cfg.infer_epochs):
        idx = strided_sample(subject.dims, cfg.coords_per_subject, rng, subject.slices)
        coords, target, _ = _batch(no_labels, idx, disp.dtype, atlas.n_classes)
        with dm.Tape() as tape:
            terms = reg_loss(atlas, disp, prior, coords, target, None, weights, weights.gamma)
        if not np.isfinite(terms.total.item()):
            raise TrainingDivergedError(f"non-finite inference loss at epoch {epoch}")
        (g,) = tape.gradient(terms.total, [prior.values])
        opt.step({"prior": g})
        hist.append(terms.total.item())
    if (atlas.checksum(), disp.checksum()) != before:
        raise RuntimeError("frozen networks changed during latent inference")
    return prior, hist


def affine_fit(atlas, subject: RegSubject, iters=300, lr=1e-3, coords_per_subject=8192, seed=0,
               weights: RegLossWeights | None = None):
    """12-parameter affine registration of the atlas to ``subject`` (intensity MSE)."""
    rng = np.random.default_rng(seed)
    field = AffineField()
    opt = dm.Adam({"A": field.A, "t": field.t}, lr=lr)
    dtype = atlas.dtype
    for _ in range(iters):
        idx = strided_sample(subject.dims, coords_per_subject, rng, subject.slices)
        coords, target, _ = _batch(subject, idx, np.float64, atlas.n_classes)
        with dm.Tape() as tape:
            c = dm.Tensor(coords)
            w = c + field.u_tensor(c)
            r, _ = atlas.forward(_cast(w, dtype))
            loss = dm.square(r - target.astype(dtype)).mean()
        gA, gt = tape.gradient(loss, [field.A, field.t])
        opt.step({"A": gA.astype(np.float64), "t": gt.astype(np.float64)})
    return field


def _cast(t, dtype):
    """Differentiable dtype cast."""
    out_data = t.data.astype(dtype)
    return dm._emit("cast", (t,), out_data, lambda g: (g.astype(t.dtype),))


# ---------------------------------------------------------------------------
# evaluation


def warp_atlas(atlas, field: DeformationField, out_grid, chunk=16384):
    """Atlas intensity and labels at ``field.warp(out_grid)`` for any grid shape (..., 3)."""
    g = np.asarray(out_grid)
    flat = g.reshape(-1, 3)
    dtype = atlas.dtype
    inten = np.empty(len(flat), dtype=np.float64)
    labels = np.empty(len(flat), dtype=np.int64)
    for s in range(0, len(flat), chunk):
        w = np.asarray(field.warp(flat[s:s + chunk])).astype(dtype)
        r, sg = atlas.forward(w)
        inten[s:s + chunk] = r.data
        labels[s:s + chunk] = sg.data.argmax(1)
    return inten.reshape(g.shape[:-1]), labels.reshape(g.shape[:-1])


def registration_metrics(atlas, field, subject: RegSubject, spacing_um=None, jac_grid=None, mask=None):
    """Per-subject row: Dice, ASSD, SSIM (warped atlas vs subject), folding %, mean |u|_1."""
    grid = grid_coords(subject.dims)
    inten, lab = warp_atlas(atlas, field, grid)
    vol = subject.volume
    sp = spacing_um if spacing_um is not None else tuple(1000.0 * s for s in vol.spacing[:2])
    rep = metrics.evaluate_bscans(inten, vol.data, lab, subject.labels.labels,
                                  n_classes=subject.labels.n_classes, spacing_um=sp)
    jg = grid_coords(subject.dims) if jac_grid is None else jac_grid
    js = metrics.jacobian_stats(field.warp, jg, mask)
    return dict(subject=subject.subject_id, ASSD=rep.mean("ASSD"), Dice=rep.mean("Dice"),
                SSIM=rep.mean("SSIM"), neg_jacobian_pct=js.neg_fraction, mean_det=js.mean_det,
                mean_l1=js.mean_l1)
