"""``nfa`` command line: config-driven experiments with reproducibility manifests.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__, atlasreg, interp
from .volio import PhantomSpec

log = logging.getLogger("nfa")

MANIFEST = "manifest.json"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

COMMON_KEYS = {"experiment", "seed", "output_dir"}

# section name -> accepted keys
_SECTIONS = {
    "phantom": {f.name for f in fields(PhantomSpec)},
    "train_interp": {f.name for f in fields(interp.InterpTrainConfig)},
    "infer_interp": {f.name for f in fields(interp.InterpInferConfig)},
    "weights_interp": {f.name for f in fields(interp.InterpLossWeights)},
    "net": {"latent_dim", "hidden", "n_layers", "omega0", "s0", "use_enface", "dtype"},
    "train_reg": {f.name for f in fields(atlasreg.RegTrainConfig)},
    "weights_reg": {f.name for f in fields(atlasreg.RegLossWeights)},
    "atlas": {"hidden", "n_layers", "omega0", "dtype"},
    "displacement": {"latent_dim", "hidden", "n_layers", "omega0", "final_omega", "max_disp", "init_range",
                     "dtype"},
}

_SLICES = {"n_keep", "slice_mode"}

# experiment -> (scalar/path keys, {section key: section schema}, path keys, required keys)
SCHEMAS = {
    "phantom-gen": ({"n_subjects", "prefix"}, {"phantom": "phantom"}, set(), set()),
    "interp-train": (_SLICES | {"dataset"}, {"train": "train_interp", "weights": "weights_interp", "net": "net"},
                     {"dataset"}, {"dataset"}),
    "interp-infer": (_SLICES | {"dataset", "model"}, {"infer": "infer_interp", "weights": "weights_interp"},
                     {"dataset", "model"}, {"dataset", "model"}),
    "interp-eval": ({"dataset", "model", "z_positions"}, {}, {"dataset", "model"}, {"dataset", "model"}),
    "linear-baseline": (_SLICES | {"dataset"}, {}, {"dataset"}, {"dataset"}),
    "atlas-train": ({"dataset"}, {"train": "train_reg", "weights": "weights_reg", "atlas": "atlas",
                                  "displacement": "displacement"}, {"dataset"}, {"dataset"}),
    "atlas-infer": (_SLICES | {"dataset", "atlas", "displacement"}, {"train": "train_reg", "weights": "weights_reg"},
                    {"dataset", "atlas", "displacement"}, {"dataset", "atlas", "displacement"}),
    "metrics": ({"reference", "predictions", "held_out_only"}, {}, {"reference"}, {"reference", "predictions"}),
    "latent-pca": ({"model", "dataset", "k"}, {}, {"model", "dataset"}, {"model"}),
    "ablation-explicit": (_SLICES | {"dataset", "max_voxels", "explicit_lr"},
                          {"train": "train_reg", "weights": "weights_reg", "atlas": "atlas",
                           "displacement": "displacement"}, {"dataset"}, {"dataset"}),
}

_SECTION_CLASSES = {
    "phantom": PhantomSpec,
    "train_interp": interp.InterpTrainConfig,
    "infer_interp": interp.InterpInferConfig,
    "weights_interp": interp.InterpLossWeights,
    "train_reg": atlasreg.RegTrainConfig,
    "weights_reg": atlasreg.RegLossWeights,
}


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


# ---------------------------------------------------------------------------
# config handling


def load_config(path):
    """Parse a JSON config; relative paths resolve against the config's directory."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from None
    if not isinstance(cfg, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return resolve_paths(cfg, path.parent)


def resolve_paths(cfg, base):
    cfg = json.loads(json.dumps(cfg))
    schema = SCHEMAS.get(cfg.get("experiment"))
    path_keys = set(schema[2]) if schema else set()
    for k in path_keys | {"output_dir"}:
        if isinstance(cfg.get(k), str):
            cfg[k] = str((Path(base) / cfg[k]).resolve())
    if isinstance(cfg.get("predictions"), dict):
        cfg["predictions"] = {n: str((Path(base) / p).resolve()) for n, p in cfg["predictions"].items()}
    return cfg


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, sets=(), seed=None, out=None):
    cfg = json.loads(json.dumps(cfg))
    for item in sets:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"--set {key}: {p} is not a section"])
        node[parts[-1]] = _parse_value(val)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = str(Path(out).resolve())
    return cfg


def validate_config(cfg):
    """All violations as human-readable strings; never touches the filesystem beyond existence checks."""
    diags = []
    kind = cfg.get("experiment")
    if kind not in SCHEMAS:
        return [f"experiment: unknown or missing kind {kind!r} (choose from {', '.join(sorted(SCHEMAS))})"]
    scalars, sections, paths, required = SCHEMAS[kind]
    allowed = COMMON_KEYS | scalars | set(sections)
    for k in sorted(set(cfg) - allowed):
        diags.append(f"unknown key {k!r} for experiment {kind}")
    for k in sorted(required - set(cfg)):
        diags.append(f"missing required key {k!r}")
    if "output_dir" not in cfg:
        diags.append("missing required key 'output_dir'")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        diags.append(f"seed: must be a non-negative integer, got {seed!r}")
    for k in sorted(paths & set(cfg)):
        if not isinstance(cfg[k], str) or not Path(cfg[k]).exists():
            diags.append(f"{k}: path does not exist: {cfg[k]}")
    if kind == "metrics" and isinstance(cfg.get("predictions"), dict):
        for name, p in cfg["predictions"].items():
            if not Path(p).exists():
                diags.append(f"predictions.{name}: path does not exist: {p}")
    if "n_keep" in cfg and (not isinstance(cfg["n_keep"], int) or cfg["n_keep"] < 2):
        diags.append(f"n_keep: must be an integer >= 2, got {cfg['n_keep']!r}")
    if "explicit_lr" in cfg:
        v = cfg["explicit_lr"]
        if (not isinstance(v, list) or len(v) != 2
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in v)):
            diags.append(f"explicit_lr: learning rate must be positive, expected [pretrain_lr, lr_atlas], got {v!r}")
    if cfg.get("slice_mode", "equidistant") not in ("equidistant", "every_kth"):
        diags.append(f"slice_mode: unknown mode {cfg['slice_mode']!r}")
    for sec, schema in sections.items():
        body = cfg.get(sec)
        if body is None:
            continue
        if not isinstance(body, dict):
            diags.append(f"{sec}: must be an object")
            continue
        for k in sorted(set(body) - _SECTIONS[schema]):
            diags.append(f"unknown key '{sec}.{k}'")
        for k, v in body.items():
            if ("lr" in k.split("_") or k.startswith("lr")) and isinstance(v, (int, float)) and v <= 0:
                diags.append(f"{sec}.{k}: learning rate must be positive, got {v}")
            elif k in ("epochs", "iters", "infer_epochs", "hidden", "n_layers", "latent_dim") and \
                    isinstance(v, (int, float)) and v < 1:
                diags.append(f"{sec}.{k}: must be >= 1, got {v}")
        cls = _SECTION_CLASSES.get(schema)
        known = {k: v for k, v in body.items() if k in _SECTIONS[schema]}
        if cls is not None and not any(d.startswith(f"{sec}.") for d in diags):
            try:
                cls(**known)
            except (TypeError, ValueError) as e:
                diags.append(f"{sec}: {e}")
    return diags


def config_hash(cfg):
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions():
    return {"nfa": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


# ---------------------------------------------------------------------------
# execution


def resolve_threads(arg):
    if arg is not None:
        return int(arg)
    env = os.environ.get("NFA_THREADS")
    return int(env) if env else None


def execute(cfg, threads=None, argv=None):
    """Validate, run and write the manifest. Returns the manifest dict."""
    from . import pipelines

    diags = validate_config(cfg)
    if diags:
        raise ConfigError(diags)
    cfg = dict(cfg)
    cfg.setdefault("seed", 0)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(limits=threads):
        written, timing = pipelines.RUNNERS[cfg["experiment"]](cfg, out)
    wall = time.perf_counter() - t0
    (out / pipelines.TIMING_FILE).write_text(json.dumps({"wall_seconds": wall, **timing}, indent=1) + "\n")
    artifacts = {}
    for p in written:
        p = Path(p).resolve()
        if out.resolve() not in p.parents:
            raise RuntimeError(f"pipeline wrote outside its output directory: {p}")
        artifacts[str(p.relative_to(out.resolve()))] = file_hash(p)
    manifest = {
        "format": "nfa-manifest-1",
        "experiment": cfg["experiment"],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "threads": threads,
        "versions": versions(),
        "wall_seconds": wall,
        "artifacts": dict(sorted(artifacts.items())),
        "volatile": [pipelines.TIMING_FILE],
        "argv": list(argv or []),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _stderr(msg):
    print(msg, file=sys.stderr)


def cmd_run(args):
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.set or (), args.seed, args.out)
        manifest = execute(cfg, resolve_threads(args.threads), sys.argv)
    except ConfigError as e:
        for d in e.diagnostics:
            _stderr(f"config error: {d}")
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - reported, exit code 1
        _stderr(f"error: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    _stderr(f"done: {len(manifest['artifacts'])} artifacts in {cfg['output_dir']} "
            f"({manifest['wall_seconds']:.1f}s)")
    return EXIT_OK


def cmd_validate(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        for d in e.diagnostics:
            _stderr(f"config error: {d}")
        return EXIT_CONFIG
    diags = validate_config(cfg)
    for d in diags:
        print(d)
    return EXIT_CONFIG if diags else EXIT_OK


def cmd_rerun(args):
    """Re-execute a manifest's config and compare artifact hashes."""
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = manifest["config"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        _stderr(f"error: unreadable manifest {args.manifest}: {e}")
        return EXIT_CONFIG
    threads = resolve_threads(args.threads)
    if threads is None:
        threads = manifest.get("threads")
    cfg = apply_overrides(cfg, (), None, args.out)
    try:
        new = execute(cfg, threads, sys.argv)
    except ConfigError as e:
        for d in e.diagnostics:
            _stderr(f"config error: {d}")
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        _stderr(f"error: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    diff = sorted(k for k in set(manifest["artifacts"]) | set(new["artifacts"])
                  if manifest["artifacts"].get(k) != new["artifacts"].get(k))
    for k in diff:
        _stderr(f"mismatch: {k}")
    if diff:
        return EXIT_RUNTIME
    _stderr(f"reproduced {len(new['artifacts'])} artifacts")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nfa", description="Implicit neural representations for anisotropic volumes")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--threads", type=int, default=None, help="cap BLAS threads (falls back to NFA_THREADS)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    rr = sub.add_parser("rerun", help="re-execute a run from its manifest and compare artifacts")
    rr.add_argument("manifest")
    rr.add_argument("--out", default=None)
    rr.add_argument("--threads", type=int, default=None)
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
