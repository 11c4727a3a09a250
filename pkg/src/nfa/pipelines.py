"""On-disk pipelines behind the ``nfa`` subcommands.

Each runner takes a validated config dict and an output directory, writes
its artifacts there and returns the list of written paths. Wall-clock
numbers go to ``timing.json`` so every other artifact is reproducible.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, atlasreg, interp, metrics
from .nets import AtlasNet, DisplacementNet, InterpNet, load_checkpoint, save_checkpoint
from .volio import (LabelVolume, PhantomSpec, Volume, minmax_normalize, phantom_generate,
                    read_enface, read_labels, read_volume, slice_schedule, write_enface, write_labels,
                    write_volume)

SUBJECTS_FILE = "subjects.json"
TIMING_FILE = "timing.json"


# ---------------------------------------------------------------------------
# datasets on disk


def write_dataset(out, subjects, extra=None):
    """Write (id, Volume, LabelVolume|None, EnFaceImage|None) tuples plus an index file."""
    out = Path(out)
    index = []
    written = []
    for sid, vol, lab, ef in subjects:
        entry = {"id": sid, "volume": f"{sid}.vol"}
        write_volume(out / entry["volume"], vol)
        written.append(out / entry["volume"])
        if lab is not None:
            entry["labels"] = f"{sid}.lab"
            write_labels(out / entry["labels"], lab)
            written.append(out / entry["labels"])
        if ef is not None:
            entry["enface"] = f"{sid}.ef"
            write_enface(out / entry["enface"], ef)
            written.append(out / entry["enface"])
        index.append(entry)
    doc = {"subjects": index, **(extra or {})}
    (out / SUBJECTS_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    written.append(out / SUBJECTS_FILE)
    return written


def read_dataset(path):
    """Return a list of dicts with keys id, volume, labels, enface (None when absent)."""
    path = Path(path)
    doc = json.loads((path / SUBJECTS_FILE).read_text())
    out = []
    for e in doc["subjects"]:
        out.append(dict(
            id=e["id"],
            volume=read_volume(path / e["volume"]),
            labels=read_labels(path / e["labels"]) if "labels" in e else None,
            enface=read_enface(path / e["enface"]) if "enface" in e else None,
        ))
    return out


def _interp_subjects(path):
    return [interp.Subject(minmax_normalize(d["volume"]), d["enface"], d["labels"], d["id"])
            for d in read_dataset(path)]


def _reg_subjects(path, slices=None):
    return [atlasreg.RegSubject(minmax_normalize(d["volume"]), d["labels"], slices, d["id"])
            for d in read_dataset(path)]


def _kept_slices(cfg, nz):
    return slice_schedule(nz, int(cfg.get("n_keep", 16)), cfg.get("slice_mode", "equidistant"))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in r])
    return Path(path)


def _dc(cls, d):
    return cls(**(d or {}))


# ---------------------------------------------------------------------------
# runners


def run_phantom_gen(cfg, out):
    spec = PhantomSpec.from_dict(cfg.get("phantom", {}))
    n = int(cfg.get("n_subjects", 1))
    prefix = cfg.get("prefix", "s")
    subjects = []
    for i in range(n):
        ph = phantom_generate(replace(spec, seed=cfg["seed"] + i))
        subjects.append((f"{prefix}{cfg['seed'] + i:03d}", ph.volume, ph.labels, ph.enface))
    return write_dataset(out, subjects, {"phantom": spec.to_dict()}), {}


def run_interp_train(cfg, out):
    subjects = _interp_subjects(cfg["dataset"])
    kept = _kept_slices(cfg, subjects[0].volume.dims[2])
    tcfg = _dc(interp.InterpTrainConfig, {"seed": cfg["seed"], **cfg.get("train", {})})
    weights = _dc(interp.InterpLossWeights, cfg.get("weights"))
    net = InterpNet(subjects[0].labels.n_classes, seed=cfg["seed"], **cfg.get("net", {}))
    t0 = time.perf_counter()
    net, priors, hist = interp.interp_train(subjects, kept, tcfg, weights, net=net)
    secs = time.perf_counter() - t0
    ck = out / "interp.ckpt"
    save_checkpoint(ck, net, priors, {"kept_slices": [int(z) for z in kept]})
    hist.to_csv(out / "history.csv")
    return [ck, out / "history.csv"], {"train_seconds": secs}


def _write_predictions(out, sid, inten, labels, ref_vol, n_classes):
    vp = out / f"{sid}.vol"
    lp = out / f"{sid}.lab"
    write_volume(vp, Volume(inten.astype(np.float32), ref_vol.spacing))
    write_labels(lp, LabelVolume(labels.astype(np.uint8), n_classes, ref_vol.spacing))
    return [vp, lp]


def run_interp_infer(cfg, out):
    net, _, meta = load_checkpoint(cfg["model"])
    subjects = _interp_subjects(cfg["dataset"])
    kept = _kept_slices(cfg, subjects[0].volume.dims[2])
    icfg = _dc(interp.InterpInferConfig, {"seed": cfg["seed"], **cfg.get("infer", {})})
    weights = _dc(interp.InterpLossWeights, cfg.get("weights"))
    priors, written, index = [], [], []
    t0 = time.perf_counter()
    for s in subjects:
        p, _ = interp.interp_infer_latent(net, s, kept, icfg, weights)
        priors.append(p)
        inten, lab = interp.interp_evaluate(net, p, s.volume.dims, s.enface)
        written += _write_predictions(out, s.subject_id, inten, lab, s.volume, net.n_classes)
        index.append({"id": s.subject_id, "volume": f"{s.subject_id}.vol", "labels": f"{s.subject_id}.lab"})
    ck = out / "priors.ckpt"
    save_checkpoint(ck, net, priors, {"kept_slices": [int(z) for z in kept]})
    (out / SUBJECTS_FILE).write_text(json.dumps({"subjects": index, "kept_slices": [int(z) for z in kept]},
                                                indent=1, sort_keys=True) + "\n")
    return written + [ck, out / SUBJECTS_FILE], {"infer_seconds": time.perf_counter() - t0}


def run_interp_eval(cfg, out):
    """Evaluate stored priors on an arbitrary slow-axis grid (``z_positions``)."""
    net, priors, meta = load_checkpoint(cfg["model"])
    data = read_dataset(cfg["dataset"])
    by_id = {d["id"]: d for d in data}
    zpos = cfg.get("z_positions")
    written = []
    for p in priors:
        d = by_id[p.subject_id]
        inten, lab = interp.interp_evaluate(net, p, d["volume"].dims, d["enface"], z_positions=zpos)
        written += _write_predictions(out, p.subject_id, inten, lab, d["volume"], net.n_classes)
    return written, {}


COMPARISON_HEADER = ["method", "MAE", "PSNR", "SSIM", "Dice", "ASSD", "HD"]


def run_metrics(cfg, out):
    """Compare prediction directories against a reference dataset on held-out slices."""
    ref = {d["id"]: d for d in read_dataset(cfg["reference"])}
    methods = cfg["predictions"]
    rows = []
    per_rows = []
    for name, path in sorted(methods.items()):
        doc = json.loads((Path(path) / SUBJECTS_FILE).read_text())
        kept = doc.get("kept_slices")
        vals = {k: [] for k in COMPARISON_HEADER[1:]}
        for e in doc["subjects"]:
            r = ref[e["id"]]
            pv = read_volume(Path(path) / e["volume"])
            pl = read_labels(Path(path) / e["labels"])
            nz = r["volume"].dims[2]
            zs = interp.held_out_slices(nz, kept) if (kept and cfg.get("held_out_only", True)) else range(nz)
            sp_um = tuple(1000.0 * s for s in r["volume"].spacing[:2])
            rep = metrics.evaluate_bscans(pv.data, minmax_normalize(r["volume"]).data, pl.labels,
                                          r["labels"].labels, r["labels"].n_classes, list(zs), sp_um,
                                          meta={"subject": e["id"], "method": name})
            for k in vals:
                vals[k].append(rep.mean(k))
            per_rows.append([name, e["id"]] + [rep.mean(k) for k in COMPARISON_HEADER[1:]])
        rows.append([name] + [float(np.nanmean(vals[k])) for k in COMPARISON_HEADER[1:]])
    t = _write_csv(out / "comparison.csv", COMPARISON_HEADER, rows)
    p = _write_csv(out / "per_subject.csv", ["method", "subject"] + COMPARISON_HEADER[1:], per_rows)
    return [t, p], {}


def run_linear_baseline(cfg, out):
    data = read_dataset(cfg["dataset"])
    kept = _kept_slices(cfg, data[0]["volume"].dims[2])
    written, index = [], []
    for d in data:
        inten, lab = interp.linear_interp_baseline(minmax_normalize(d["volume"]), kept, d["labels"])
        written += _write_predictions(out, d["id"], inten, lab, d["volume"], d["labels"].n_classes)
        index.append({"id": d["id"], "volume": f"{d['id']}.vol", "labels": f"{d['id']}.lab"})
    (out / SUBJECTS_FILE).write_text(json.dumps({"subjects": index, "kept_slices": [int(z) for z in kept]},
                                                indent=1, sort_keys=True) + "\n")
    return written + [out / SUBJECTS_FILE], {}


REG_HEADER = ["subject", "ASSD", "Dice", "SSIM", "neg_jacobian_pct", "mean_abs_u_l1"]


def _reg_rows(atlas, fields_, subjects):
    rows = []
    for f, s in zip(fields_, subjects):
        m = atlasreg.registration_metrics(atlas, f, s)
        rows.append([s.subject_id, m["ASSD"], m["Dice"], m["SSIM"], m["neg_jacobian_pct"], m["mean_l1"]])
    return rows


def _reg_cfg(cfg):
    return _dc(atlasreg.RegTrainConfig, {"seed": cfg["seed"], **cfg.get("train", {})})


def run_atlas_train(cfg, out):
    subjects = _reg_subjects(cfg["dataset"])
    rcfg = _reg_cfg(cfg)
    weights = _dc(atlasreg.RegLossWeights, cfg.get("weights"))
    atlas = AtlasNet(subjects[0].labels.n_classes, seed=cfg["seed"], **cfg.get("atlas", {}))
    disp = DisplacementNet(seed=cfg["seed"], **cfg.get("displacement", {}))
    t0 = time.perf_counter()
    atlasreg.atlas_pretrain(atlas, subjects, rcfg, weights)
    priors, hist = atlasreg.joint_train(atlas, disp, subjects, rcfg, weights)
    secs = time.perf_counter() - t0
    save_checkpoint(out / "atlas.ckpt", atlas)
    save_checkpoint(out / "displacement.ckpt", disp, priors)
    _write_csv(out / "history.csv", ["iter", "subject", "mse", "seg", "disp", "total"],
               [[r["iter"], r["subject"], r["mse"], r["seg"], r["disp"], r["total"]] for r in hist])
    rows = _reg_rows(atlas, [atlasreg.DeformationField(disp, p) for p in priors], subjects)
    init = _reg_rows(atlas, [atlasreg.IdentityField() for _ in subjects], subjects)
    _write_csv(out / "report.csv", ["method"] + REG_HEADER,
               [["init"] + r for r in init] + [["geninr"] + r for r in rows])
    return ([out / "atlas.ckpt", out / "displacement.ckpt", out / "history.csv", out / "report.csv"],
            {"train_seconds": secs})


def run_atlas_infer(cfg, out):
    atlas, _, _ = load_checkpoint(cfg["atlas"])
    disp, _, _ = load_checkpoint(cfg["displacement"])
    nz = read_dataset(cfg["dataset"])[0]["volume"].dims[2]
    slices = _kept_slices(cfg, nz) if "n_keep" in cfg else None
    subjects = _reg_subjects(cfg["dataset"], slices)
    rcfg = _reg_cfg(cfg)
    weights = _dc(atlasreg.RegLossWeights, cfg.get("weights"))
    priors, secs = [], []
    for s in subjects:
        t0 = time.perf_counter()
        p, _ = atlasreg.reg_infer_latent(atlas, disp, s, rcfg, weights)
        secs.append(time.perf_counter() - t0)
        priors.append(p)
    save_checkpoint(out / "priors.ckpt", disp, priors)
    full = _reg_subjects(cfg["dataset"])
    rows = _reg_rows(atlas, [atlasreg.DeformationField(disp, p) for p in priors], full)
    _write_csv(out / "report.csv", REG_HEADER, rows)
    return [out / "priors.ckpt", out / "report.csv"], {"seconds_per_subject": secs}


def run_latent_pca(cfg, out):
    disp, priors, _ = load_checkpoint(cfg["model"])
    k = int(cfg.get("k", 2))
    res = analysis.pca(priors, k)
    (out / "pca.csv").write_text(res.to_csv())
    written = [out / "pca.csv"]
    if cfg.get("dataset"):
        subjects = {s.subject_id: s for s in _reg_subjects(cfg["dataset"])}
        grid = None
        dets = []
        for p in priors:
            s = subjects[p.subject_id]
            grid = atlasreg.grid_coords(s.dims)
            mask = (s.labels.labels >= 1) & (s.labels.labels < s.labels.n_classes - 1)
            dets.append(analysis.masked_mean_det(atlasreg.DeformationField(disp, p), grid, mask))
        corr = analysis.latent_jacobian_correlation(priors, k=k, mean_det=dets)
        (out / "scatter.csv").write_text(corr.scatter_csv())
        _write_csv(out / "correlation.csv", ["component", "pearson_r", "zero_variance"],
                   [[i + 1, float(r), bool(f)] for i, (r, f) in enumerate(zip(corr.r, corr.zero_variance))])
        written += [out / "scatter.csv", out / "correlation.csv"]
    return written, {}


def run_ablation_explicit(cfg, out):
    """Implicit vs explicit atlas on a reduced-slice cohort."""
    data = read_dataset(cfg["dataset"])
    nz = data[0]["volume"].dims[2]
    kept = _kept_slices(cfg, nz)
    rcfg = _reg_cfg(cfg)
    weights = _dc(atlasreg.RegLossWeights, cfg.get("weights"))
    report, timing = explicit_vs_implicit(
        [atlasreg.RegSubject(minmax_normalize(d["volume"]), d["labels"], kept, d["id"]) for d in data],
        rcfg, weights, cfg["seed"], cfg.get("atlas", {}), cfg.get("displacement", {}),
        int(cfg.get("max_voxels", 2_000_000)), cfg.get("explicit_lr"))
    p = _write_csv(out / "atlas_ablation.csv", ["atlas", "ASSD", "Dice", "SSIM"], report)
    return [p], timing


def explicit_vs_implicit(subjects, rcfg, weights, seed=0, atlas_kw=None, disp_kw=None, max_voxels=2_000_000,
                         explicit_lr=None):
    """Train both atlas variants under the same loss; rows (name, ASSD, Dice, SSIM) and timings.

    ``explicit_lr`` is an optional (pretrain_lr, lr_atlas) pair for the
    parameter-image atlas, whose zero-initialized voxels move about one
    learning rate per Adam step and need larger steps than network weights.
    """
    n_classes = subjects[0].labels.n_classes
    dims = subjects[0].dims
    rows, timing = [], {}
    for name in ("implicit", "explicit"):
        t0 = time.perf_counter()
        cfg = rcfg
        if name == "implicit":
            atlas = AtlasNet(n_classes, seed=seed, **(atlas_kw or {}))
        else:
            atlas = atlasreg.ExplicitAtlas(n_classes, (dims[0], dims[1], len(subjects[0].slices)),
                                           max_voxels=max_voxels)
            if explicit_lr is not None:
                cfg = replace(rcfg, pretrain_lr=float(explicit_lr[0]), lr_atlas=float(explicit_lr[1]))
        disp = DisplacementNet(seed=seed, **(disp_kw or {}))
        atlasreg.atlas_pretrain(atlas, subjects, cfg, weights)
        priors, _ = atlasreg.joint_train(atlas, disp, subjects, cfg, weights)
        timing[f"{name}_seconds"] = time.perf_counter() - t0
        ms = [atlasreg.registration_metrics(atlas, atlasreg.DeformationField(disp, p),
                                            atlasreg.RegSubject(s.volume, s.labels, None, s.subject_id))
              for s, p in zip(subjects, priors)]
        rows.append([name] + [float(np.nanmean([m[k] for m in ms])) for k in ("ASSD", "Dice", "SSIM")])
    return rows, timing


RUNNERS = {
    "phantom-gen": run_phantom_gen,
    "interp-train": run_interp_train,
    "interp-infer": run_interp_infer,
    "interp-eval": run_interp_eval,
    "linear-baseline": run_linear_baseline,
    "atlas-train": run_atlas_train,
    "atlas-infer": run_atlas_infer,
    "metrics": run_metrics,
    "latent-pca": run_latent_pca,
    "ablation-explicit": run_ablation_explicit,
}

