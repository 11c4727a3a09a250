"""Desk-scale experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from . import interp, metrics
from .volio import PhantomSpec, minmax_normalize, phantom_generate, slice_schedule

log = logging.getLogger(__name__)

# phantom used for the interpolation experiments: relative thickness
# undulation along the slow axis that linear slice interpolation cannot follow,
# and one vessel meandering laterally faster than the kept-slice spacing.
# Six layers of ~5 voxels each, so one-voxel boundary errors do not dominate Dice
INTERP_PHANTOM = PhantomSpec(dims=(48, 32, 64), n_layers=6, top=0.15, thickness=0.55, thickness_variation=0.1,
                             slow_wave_amplitude=0.25, slow_wave_frequency=(4.0, 6.0),
                             vessel_count=1, vessel_slope=0.1, vessel_wiggle=6.0, vessel_wiggle_period=9.0)


def make_cohort(spec: PhantomSpec, n, seed0=0, prefix="s"):
    """``n`` phantoms with seeds ``seed0 .. seed0+n-1`` as interp Subjects plus raw phantoms."""
    subjects, phantoms = [], []
    for i in range(n):
        ph = phantom_generate(replace(spec, seed=seed0 + i))
        phantoms.append(ph)
        subjects.append(interp.Subject(minmax_normalize(ph.volume), ph.enface, ph.labels, f"{prefix}{seed0 + i}"))
    return subjects, phantoms


def shadow_column(bscan, labels, spec: PhantomSpec, first_layer=3):
    """Lateral index of the darkest column in the deeper retinal layers.

    Each column's mean intensity over the layers ``first_layer .. n_layers-1``
    is divided by the mean of the shadow-free layer template on the same
    pixels, so columns are comparable regardless of layer composition.
    """
    from .volio import _LAYER_INTENSITY
    tmpl = np.array([spec.background] + [_LAYER_INTENSITY[k % len(_LAYER_INTENSITY)]
                                         for k in range(spec.n_layers)])[labels]
    band = (labels >= first_layer) & (labels < spec.n_layers)
    num = (np.asarray(bscan) * band).sum(0)
    den = (tmpl * band).sum(0)
    ratio = np.where(band.any(0), num / np.maximum(den, 1e-9), np.inf)
    return int(np.argmin(ratio))


def shadow_errors(volume, phantom, spec: PhantomSpec, slices):
    """|located shadow column - true vessel position| per slice (first vessel)."""
    lab = phantom.labels.labels
    return np.array([abs(shadow_column(volume[:, :, z], lab[:, :, z], spec) - phantom.vessel_x[0, z])
                     for z in slices])


def interp_comparison(n_subjects=8, n_keep=16, spec=INTERP_PHANTOM, cfg=None, net_kw=None,
                      single_cfg=None, n_single=2, seed=0):
    """Held-out-slice Dice of the generalizable INR, linear interpolation and SingleINR.

    Returns a dict with per-method mean layer Dice and per-subject values.
    """
    subjects, _ = make_cohort(spec, n_subjects, seed0=seed * 1000)
    nz = spec.dims[2]
    kept = slice_schedule(nz, n_keep, "equidistant")
    held = interp.held_out_slices(nz, kept)
    cls = metrics.layer_classes(spec.n_classes)
    t0 = time.perf_counter()
    net, priors, hist = interp.interp_train(subjects, kept, cfg, net_kw=net_kw)
    t_train = time.perf_counter() - t0

    def held_dice(labels, gt):
        return float(np.mean([metrics.dice(labels[:, :, z], gt[:, :, z], cls)[1] for z in held]))

    rows = {"geninr": [], "linear": [], "single": []}
    for s, p in zip(subjects, priors):
        _, lab = interp.interp_evaluate(net, p, spec.dims, s.enface)
        rows["geninr"].append(held_dice(lab, s.labels.labels))
        _, lin = interp.linear_interp_baseline(s.volume, kept, s.labels)
        rows["linear"].append(held_dice(lin, s.labels.labels))
    for s in subjects[:n_single]:
        model = interp.single_inr_fit(s, kept, with_ef=False, squeeze_spacing=True, cfg=single_cfg)
        _, lab = model.predict()
        rows["single"].append(held_dice(lab, s.labels.labels))
    out = {k: float(np.mean(v)) if v else np.nan for k, v in rows.items()}
    out.update(per_subject=rows, train_seconds=t_train, history=hist, net=net, priors=priors,
               subjects=subjects, kept=kept)
    return out


# registration cohort: larger random surface undulations so subjects differ
# in shape, not only in texture
REG_PHANTOM = PhantomSpec(dims=(40, 32, 64), surface_amplitude=(3.0, 6.0), surface_frequency=(0.5, 1.0),
                          thickness_variation=0.3, vessel_count=1)


def make_reg_cohort(spec: PhantomSpec, n, seed0=0, prefix="r", slices=None):
    from .atlasreg import RegSubject
    out = []
    for i in range(n):
        ph = phantom_generate(replace(spec, seed=seed0 + i))
        out.append(RegSubject(minmax_normalize(ph.volume), ph.labels, slices, f"{prefix}{seed0 + i}"))
    return out


def registration_run(n_subjects=6, spec=REG_PHANTOM, cfg=None, weights=None, atlas_kw=None, disp_kw=None,
                     seed=0, affine_iters=100):
    """Pretrain the atlas, jointly train, and score init / affine / deformable rows."""
    from . import atlasreg as ar
    from .nets import AtlasNet, DisplacementNet
    cfg = cfg or ar.RegTrainConfig()
    data = make_reg_cohort(spec, n_subjects, seed0=seed * 1000 + 500)
    atlas = AtlasNet(spec.n_classes, seed=seed, **(atlas_kw or {}))
    disp = DisplacementNet(seed=seed, **(disp_kw or {}))
    t0 = time.perf_counter()
    _, pre_hist = ar.atlas_pretrain(atlas, data, cfg, weights)
    t_pre = time.perf_counter() - t0
    priors, hist = ar.joint_train(atlas, disp, data, cfg, weights)
    t_joint = time.perf_counter() - t0 - t_pre
    rows = {"init": [], "affine": [], "geninr": []}
    for s, p in zip(data, priors):
        rows["init"].append(ar.registration_metrics(atlas, ar.IdentityField(), s))
        if affine_iters:
            aff = ar.affine_fit(atlas, s, iters=affine_iters, coords_per_subject=cfg.coords_per_subject,
                                seed=seed)
            rows["affine"].append(ar.registration_metrics(atlas, aff, s))
        rows["geninr"].append(ar.registration_metrics(atlas, ar.DeformationField(disp, p), s))
    return dict(rows=rows, atlas=atlas, disp=disp, priors=priors, data=data, history=hist,
                pre_history=pre_hist, t_pre=t_pre, t_joint=t_joint)


# expansion cohort: one base phantom whose layer thickness is scaled about the
# retina's centre; the calmer surfaces keep every scale in [0.8, 1.2] inside
# the 40-row volume
EXPANSION_PHANTOM = replace(REG_PHANTOM, top=0.2, thickness=0.45, pit_depth=0.3, thickness_variation=0.2,
                            surface_amplitude=(2.0, 4.0), seed=4200)


def expansion_cohort(spec=EXPANSION_PHANTOM, expansions=tuple(np.linspace(0.8, 1.2, 8))):
    """Subjects identical except for ``expansion``; surfaces must pass on the first draw.

    The top surface moves by half the thickness change so the retina grows
    about a fixed centre and alignment needs a stretch, not a shift.
    """
    from .atlasreg import RegSubject
    out = []
    for i, e in enumerate(expansions):
        top = spec.top + (1.0 - e) * spec.thickness / 2
        ph = phantom_generate(replace(spec, expansion=float(e), top=top, max_attempts=1))
        out.append(RegSubject(minmax_normalize(ph.volume), ph.labels, None, f"e{i}"))
    return out


def retina_mask(labels):
    """Voxels strictly between the background above and the deepest class."""
    lab = labels.labels
    return (lab >= 1) & (lab < labels.n_classes - 1)


def expansion_direction(priors, expansions):
    """Least-squares latent direction per unit expansion, and the prior mean."""
    P = np.array([p.array for p in priors], dtype=np.float64)
    e = np.asarray(expansions, dtype=np.float64)
    e = e - e.mean()
    mean = P.mean(0)
    return (e @ (P - mean)) / (e @ e), mean


def expansion_correlation(cfg, atlas_kw=None, disp_kw=None, spec=EXPANSION_PHANTOM,
                          expansions=tuple(np.linspace(0.8, 1.2, 8)), k=2, seed=0, noise=0.02):
    """Correlate prior PCs with masked mean det over a cohort with one expansion direction.

    The nets are trained jointly on the expansion phantoms. Trained priors also
    carry their random initialisation, which with few subjects in a long latent
    swamps PCA, so the analysed cohort is rebuilt as ``mean + t * v`` along the
    fitted expansion direction ``v`` plus isotropic noise of scale ``noise``.
    """
    from . import analysis
    from . import atlasreg as ar
    from .nets import AtlasNet, DisplacementNet, LatentPrior
    from .volio import grid_coords
    data = expansion_cohort(spec, expansions)
    atlas = AtlasNet(spec.n_classes, seed=seed, **(atlas_kw or {}))
    disp = DisplacementNet(seed=seed, **(disp_kw or {}))
    ar.atlas_pretrain(atlas, data, cfg)
    trained, _ = ar.joint_train(atlas, disp, data, cfg)
    v, mean = expansion_direction(trained, expansions)
    rng = np.random.default_rng(seed)
    t = np.asarray(expansions, dtype=np.float64) - np.mean(expansions)
    priors = [LatentPrior((mean + ti * v + rng.normal(0.0, noise, v.size)).astype(disp.dtype), f"c{i}")
              for i, ti in enumerate(t)]
    grid = grid_coords(data[0].dims)
    mask = retina_mask(data[len(data) // 2].labels)
    dets = [analysis.masked_mean_det(ar.DeformationField(disp, p), grid, mask) for p in priors]
    return analysis.latent_jacobian_correlation(priors, k=k, mean_det=dets)
