"""Generalizable interpolation/segmentation INR, plus the two baselines.

Training batches are whole B-scans: every forward pass sees all (y, x)
coordinates of one slow-axis slice of one subject.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmath as dm
from . import metrics
from .nets import InterpNet, LatentPrior, SingleINR, init_latent_interp
from .volio import EnFaceImage, LabelVolume, Volume, grid_coords

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class InterpLossWeights:
    alpha: float = 0.2  # segmentation
    beta: float = 0.2  # latent L2
    ssim_weight: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class InterpTrainConfig:
    epochs: int = 1500
    lr0: float = 1e-4
    lr_decay: float = 0.99
    early_stop_after: int = 100
    patience: int = 20
    min_delta: float = 1e-5
    seed: int = 0
    latent_lr: float | None = None  # defaults to lr0
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.early_stop_after < 0:
            raise ValueError("epoch counts must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.lr0 <= 0 or (self.latent_lr is not None and self.latent_lr <= 0):
            raise ValueError("learning rates must be positive")


@dataclass
class InterpInferConfig:
    epochs: int = 100
    lr: float = 5e-3
    lr_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("inference needs epochs >= 1 and lr > 0")


@dataclass
class Subject:
    """One training or test case: intensities, en-face and (optional) labels."""

    volume: Volume
    enface: EnFaceImage
    labels: LabelVolume | None = None
    subject_id: str = ""

    def __post_init__(self):
        ny, nx, nz = self.volume.dims
        if self.enface.dims != (nx, nz):
            raise ValueError(f"en-face dims {self.enface.dims} do not match volume lateral dims {(nx, nz)}")
        if self.labels is not None and self.labels.dims != self.volume.dims:
            raise ValueError(f"label dims {self.labels.dims} != volume dims {self.volume.dims}")


class EarlyStopping:
    """Stop once ``patience`` epochs pass without an improvement > ``min_delta``.

    Only fires at or after epoch ``after`` (0-based epoch index).
    """

    def __init__(self, after=100, patience=20, min_delta=1e-5):
        self.after, self.patience, self.min_delta = after, patience, min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, epoch, loss):
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        return epoch >= self.after and self.wait >= self.patience


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)

    def append(self, epoch, recon, seg, reg):
        self.rows.append(dict(epoch=epoch, recon=recon, seg=seg, reg=reg, total=recon + seg + reg))

    @property
    def total(self):
        return np.array([r["total"] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "recon", "seg", "reg", "total"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (r[k] if k == "epoch" else f"{r[k]:.10g}") for k in w.fieldnames})


# ---------------------------------------------------------------------------
# losses


def ssim_tensor(pred, target, window=metrics.SSIM_WINDOW, data_range=1.0):
    """Differentiable mean windowed SSIM of a (ny, nx) prediction vs a fixed target."""
    t = np.asarray(target, dtype=pred.dtype)
    c1 = (metrics.SSIM_K1 * data_range) ** 2
    c2 = (metrics.SSIM_K2 * data_range) ** 2
    box = dm.box_filter2d
    mu_p = box(pred, window)
    mu_t = box(dm.Tensor(t), window).data
    var_t = box(dm.Tensor(t * t), window).data - mu_t ** 2
    var_p = box(pred * pred, window) - mu_p * mu_p
    cov = box(pred * t, window) - mu_p * mu_t
    num = (2.0 * mu_t * mu_p + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + (mu_t ** 2 + c1)) * (var_p + (var_t + c2))
    return (num / den).mean()


@dataclass
class LossTerms:
    recon: dm.Tensor
    seg: dm.Tensor
    reg: dm.Tensor
    total: dm.Tensor

    def values(self):
        return float(self.recon.item()), float(self.seg.item()), float(self.reg.item())


def bscan_loss(recon, seg, target, onehot, prior, shape, weights: InterpLossWeights, use_seg=True):
    """Per-B-scan loss terms; ``seg``/``reg`` are already weighted."""
    t = np.asarray(target, dtype=recon.dtype).reshape(-1)
    mse = dm.square(recon - t).mean()
    rec = mse
    if weights.ssim_weight > 0:
        s = ssim_tensor(recon.reshape(shape), t.reshape(shape))
        rec = rec + weights.ssim_weight * (1.0 - s)
    if use_seg and onehot is not None and weights.alpha > 0:
        seg_term = weights.alpha * dm.binary_cross_entropy(seg, onehot).mean()
    else:
        seg_term = dm.Tensor(np.zeros((), dtype=recon.dtype))
    reg = weights.beta * dm.square(prior.values).sum() if prior is not None else dm.Tensor(np.zeros(()))
    return LossTerms(rec, seg_term, reg, rec + seg_term + reg)


# ---------------------------------------------------------------------------
# batches


def bscan_batch(subject: Subject, z, dtype=np.float32):
    """Coordinates (n, 3), en-face values (n,), target (ny, nx), one-hot (n, C) or None."""
    ny, nx, nz = subject.volume.dims
    coords = grid_coords((ny, nx, nz), z_positions=[z]).reshape(-1, 3)
    ef = np.broadcast_to(subject.enface.data[:, int(z)][None, :], (ny, nx)).reshape(-1)
    target = subject.volume.data[:, :, int(z)]
    onehot = None
    if subject.labels is not None:
        onehot = subject.labels.onehot(dtype)[:, :, int(z)].reshape(ny * nx, -1)
    return coords.astype(dtype), ef.astype(dtype), target.astype(dtype), onehot


def _check_dataset(dataset):
    if not dataset:
        raise ValueError("empty dataset")
    dims = dataset[0].volume.dims
    ncls = dataset[0].labels.n_classes if dataset[0].labels is not None else None
    for s in dataset:
        if s.volume.dims != dims:
            raise ValueError(f"subject {s.subject_id!r}: dims {s.volume.dims} != {dims}")
        if s.labels is None or s.labels.n_classes != ncls:
            raise ValueError(f"subject {s.subject_id!r}: labels missing or class count differs")
    return dims, ncls


# ---------------------------------------------------------------------------
# training / inference


def interp_train(dataset, slices, cfg: InterpTrainConfig | None = None,
                 weights: InterpLossWeights | None = None, net: InterpNet | None = None,
                 net_kw=None, callback=None):
    """Jointly fit the shared network and one latent prior per subject.

    Returns (net, priors, history). One optimizer step per B-scan; an epoch
    visits every kept B-scan of every subject in a seeded random order.
    """
    cfg = cfg or InterpTrainConfig()
    weights = weights or InterpLossWeights()
    dims, ncls = _check_dataset(dataset)
    slices = [int(z) for z in slices]
    if net is None:
        net = InterpNet(ncls, seed=cfg.seed, **(net_kw or {}))
    if net.n_classes != ncls:
        raise ValueError(f"network has {net.n_classes} classes, dataset {ncls}")
    rng = np.random.default_rng(cfg.seed)
    priors = [init_latent_interp(net.L, rng, subject_id=s.subject_id or str(i), dtype=net.dtype)
              for i, s in enumerate(dataset)]
    opt_net = dm.Adam(net.params, lr=cfg.lr0, decay=cfg.lr_decay)
    opt_lat = [dm.Adam({"prior": p.values}, lr=cfg.latent_lr or cfg.lr0, decay=cfg.lr_decay)
               for p in priors]
    batches = {(i, z): bscan_batch(s, z, net.dtype) for i, s in enumerate(dataset) for z in slices}
    keys = list(batches)
    shape = dims[:2]
    stopper = EarlyStopping(cfg.early_stop_after, cfg.patience, cfg.min_delta)
    history = LossHistory()
    params = list(net.params.values())
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for j in rng.permutation(len(keys)):
            i, z = keys[j]
            coords, ef, target, onehot = batches[keys[j]]
            prior = priors[i]
            with dm.Tape() as tape:
                recon, seg = net.forward(coords, ef, prior)
                terms = bscan_loss(recon, seg, target, onehot, prior, shape, weights)
            total = terms.total.item()
            if not np.isfinite(total):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, subject {i}, slice {z}")
            grads = tape.gradient(terms.total, params + [prior.values])
            opt_net.step(dict(zip(net.params, grads[:-1])))
            opt_lat[i].step({"prior": grads[-1]})
            sums += terms.values()
        sums /= len(keys)
        history.append(epoch, *sums)
        opt_net.end_epoch()
        for o in opt_lat:
            o.end_epoch()
        if callback is not None:
            callback(epoch, history.rows[-1])
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("interp epoch %d loss %.5f (%.1fs)", epoch, history.rows[-1]["total"],
                     time.perf_counter() - t0)
        if stopper.update(epoch, history.rows[-1]["total"]):
            log.info("early stop at epoch %d", epoch)
            break
    return net, priors, history


def interp_infer_latent(net: InterpNet, subject: Subject, slices, cfg: InterpInferConfig | None = None,
                        weights: InterpLossWeights | None = None, prior: LatentPrior | None = None):
    """Fit a new latent prior from intensities only; the network stays frozen."""
    cfg = cfg or InterpInferConfig()
    weights = weights or InterpLossWeights()
    ny, nx, nz = subject.volume.dims
    if subject.enface.dims != (nx, nz):
        raise ValueError("en-face does not match the volume's lateral grid")
    before = net.checksum()
    rng = np.random.default_rng(cfg.seed)
    if prior is None:
        prior = init_latent_interp(net.L, rng, subject_id=subject.subject_id, dtype=net.dtype)
    if len(prior) != net.L:
        raise dm.ShapeError(f"prior length {len(prior)} != network latent size {net.L}")
    opt = dm.Adam({"prior": prior.values}, lr=cfg.lr, decay=cfg.lr_decay)
    # labels are deliberately dropped
    batches = [bscan_batch(Subject(subject.volume, subject.enface), z, net.dtype) for z in slices]
    history = []
    for epoch in range(cfg.epochs):
        tot = 0.0
        for j in rng.permutation(len(batches)):
            coords, ef, target, _ = batches[j]
            with dm.Tape() as tape:
                recon, seg = net.forward(coords, ef, prior)
                terms = bscan_loss(recon, seg, target, None, prior, (ny, nx), weights, use_seg=False)
            if not np.isfinite(terms.total.item()):
                raise TrainingDivergedError(f"non-finite inference loss at epoch {epoch}")
            (g,) = tape.gradient(terms.total, [prior.values])
            opt.step({"prior": g})
            tot += terms.total.item()
        opt.end_epoch()
        history.append(tot / len(batches))
    if net.checksum() != before:
        raise RuntimeError("network parameters changed during latent inference")
    return prior, history


def interp_evaluate(net: InterpNet, prior: LatentPrior, dims, ef, z_positions=None, chunk=8192):
    """Evaluate intensities and labels on the grid ``dims`` at slow positions ``z_positions``.

    ``ef`` is an :class:`EnFaceImage` or a callable ``(x, z) -> values`` on
    normalized lateral coordinates. Returns (intensity (ny, nx, nz'), labels).
    """
    lookup = ef.lookup if isinstance(ef, EnFaceImage) else ef
    g = grid_coords(dims, z_positions=z_positions)
    shape = g.shape[:3]
    flat = g.reshape(-1, 3)
    efv = lookup(flat[:, 1], flat[:, 2])
    inten = np.empty(len(flat), dtype=np.float64)
    probs = np.empty((len(flat), net.n_classes), dtype=np.float64)
    # a z-slice at a time keeps results independent of the chosen grid
    ny, nx, nzp = shape
    per = ny * nx
    order = np.arange(len(flat)).reshape(shape).transpose(2, 0, 1).reshape(nzp, per)
    for k in range(nzp):
        idx = order[k]
        r, s = net.forward(flat[idx], efv[idx], prior)
        inten[idx] = r.data
        probs[idx] = s.data
    labels = probs.argmax(axis=1).reshape(shape)
    return inten.reshape(shape), labels


# ---------------------------------------------------------------------------
# baselines


def linear_interp_baseline(volume, slices, labels=None):
    """Linear interpolation along the slow axis between kept B-scans.

    Labels are interpolated linearly and rounded half away from zero.
    Returns (intensity, labels or None) as arrays.
    """
    data = np.asarray(volume.data if isinstance(volume, Volume) else volume, dtype=np.float64)
    slices = np.asarray(sorted(int(z) for z in slices))
    if len(slices) < 2:
        raise ValueError("linear interpolation needs at least 2 slices")
    nz = data.shape[2]
    zs = np.arange(nz, dtype=np.float64)
    pos = np.clip(np.searchsorted(slices, zs, side="right") - 1, 0, len(slices) - 2)
    z0, z1 = slices[pos], slices[pos + 1]
    w = np.clip((zs - z0) / (z1 - z0), 0.0, 1.0)

    def lerp(a):
        return a[:, :, z0] * (1 - w) + a[:, :, z1] * w

    inten = lerp(data)
    lab = None
    if labels is not None:
        arr = np.asarray(labels.labels if isinstance(labels, LabelVolume) else labels, dtype=np.float64)
        cont = lerp(arr)
        lab = (np.sign(cont) * np.floor(np.abs(cont) + 0.5)).astype(np.int64)
    return inten, lab


@dataclass
class SingleINRConfig:
    epochs: int = 300
    lr: float = 1e-4
    hidden: int = 512
    n_layers: int = 3
    omega0: float = 30.0
    alpha: float = 0.2
    seed: int = 0


class SingleINRModel:
    """Fitted instance-specific baseline with its coordinate conventions."""

    def __init__(self, net: SingleINR, with_ef, z_scale, dims, enface):
        self.net, self.with_ef, self.z_scale, self.dims, self.enface = net, with_ef, z_scale, dims, enface

    def inputs(self, coords):
        c = np.array(coords, dtype=np.float64)
        c[:, 2] *= self.z_scale
        if self.with_ef:
            efv = self.enface.lookup(np.asarray(coords)[:, 1], np.asarray(coords)[:, 2])
            c = np.concatenate([c, efv[:, None]], axis=1)
        return c.astype(self.net.dtype)

    def predict(self, z_positions=None):
        g = grid_coords(self.dims, z_positions=z_positions)
        shape = g.shape[:3]
        ny, nx, nzp = shape
        inten = np.empty(shape)
        labels = np.empty(shape, dtype=np.int64)
        for k in range(nzp):
            r, s = self.net.forward(self.inputs(g[:, :, k].reshape(-1, 3)))
            inten[:, :, k] = r.data.reshape(ny, nx)
            labels[:, :, k] = s.data.argmax(1).reshape(ny, nx)
        return inten, labels


def single_inr_fit(subject: Subject, slices, with_ef=False, squeeze_spacing=False,
                   cfg: SingleINRConfig | None = None):
    """Fit a per-subject sine network to the kept B-scans (intensity + labels).

    ``squeeze_spacing`` shrinks the slow-axis coordinate so the gap between
    kept B-scans matches the fast-axis pixel pitch.
    """
    cfg = cfg or SingleINRConfig()
    slices = [int(z) for z in slices]
    if len(slices) < 2:
        raise ValueError("single-instance fit needs at least 2 slices")
    ny, nx, nz = subject.volume.dims
    ncls = subject.labels.n_classes
    z_scale = 1.0
    if squeeze_spacing:
        z_scale = min(1.0, (len(slices) - 1) / (nx - 1))
    net = SingleINR(ncls, in_dim=4 if with_ef else 3, hidden=cfg.hidden, n_layers=cfg.n_layers,
                    omega0=cfg.omega0, seed=cfg.seed)
    model = SingleINRModel(net, with_ef, z_scale, (ny, nx, nz), subject.enface)
    batches = []
    for z in slices:
        coords, _, target, onehot = bscan_batch(subject, z, net.dtype)
        batches.append((model.inputs(coords), target.reshape(-1), onehot))
    opt = dm.Adam(net.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    params = list(net.params.values())
    for epoch in range(cfg.epochs):
        for j in rng.permutation(len(batches)):
            x, t, oh = batches[j]
            with dm.Tape() as tape:
                r, s = net.forward(x)
                loss = dm.square(r - t).mean() + cfg.alpha * dm.binary_cross_entropy(s, oh).mean()
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"single INR diverged at epoch {epoch}")
            grads = tape.gradient(loss, params)
            opt.step(dict(zip(net.params, grads)))
    return model


def held_out_slices(n_total, kept):
    kept = set(int(z) for z in kept)
    return [z for z in range(n_total) if z not in kept]

