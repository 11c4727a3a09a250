import csv
import json

import pytest

from nfa import cli
from nfa.volio import read_volume

PHANTOM = dict(dims=[16, 12, 10], n_layers=3, fovea_pit=False, vessel_count=1, noise=0.05)


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "gen.json", {"experiment": "phantom-gen", "output_dir": "data", "n_subjects": 2,
                                        "phantom": PHANTOM, "seed": 3})
    assert cli.main(["run", cfg]) == 0
    return root


def interp_cfg(root, **extra):
    cfg = {"experiment": "interp-train", "dataset": "data", "output_dir": "train", "n_keep": 4,
           "train": {"epochs": 2, "lr0": 1e-3, "log_every": 0}, "net": {"latent_dim": 8, "hidden": 8}}
    cfg.update(extra)
    return write_cfg(root / "train.json", cfg)


class TestValidate:
    def test_valid(self, dataset, capsys):
        assert cli.main(["validate", interp_cfg(dataset)]) == 0
        assert capsys.readouterr().out == ""

    def test_unknown_key_named(self, dataset, capsys):
        path = interp_cfg(dataset, bogus=1)
        assert cli.main(["validate", path]) == 2
        assert "'bogus'" in capsys.readouterr().out

    def test_negative_lr_cited(self, dataset, capsys):
        cfg = json.loads(open(interp_cfg(dataset)).read())
        cfg["train"]["lr0"] = -1e-3
        assert cli.main(["validate", write_cfg(dataset / "bad.json", cfg)]) == 2
        assert "train.lr0: learning rate must be positive" in capsys.readouterr().out

    def test_explicit_lr_checked(self, dataset, capsys):
        path = write_cfg(dataset / "ab_bad.json", {"experiment": "ablation-explicit", "dataset": "data",
                                                   "output_dir": "x", "explicit_lr": [0.1, -1]})
        assert cli.main(["validate", path]) == 2
        assert "explicit_lr: learning rate must be positive" in capsys.readouterr().out

    def test_missing_dataset(self, tmp_path, capsys):
        path = write_cfg(tmp_path / "c.json", {"experiment": "interp-train", "dataset": "nowhere",
                                               "output_dir": "o"})
        assert cli.main(["validate", path]) == 2
        assert "path does not exist" in capsys.readouterr().out

    def test_unknown_experiment(self, tmp_path, capsys):
        assert cli.main(["validate", write_cfg(tmp_path / "c.json", {"experiment": "nope"})]) == 2
        assert "unknown or missing kind" in capsys.readouterr().out

    def test_invalid_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{")
        assert cli.main(["validate", str(tmp_path / "c.json")]) == 2

    def test_run_refuses_invalid_config(self, dataset, capsys):
        path = interp_cfg(dataset, bogus=1, output_dir="refused")
        assert cli.main(["run", path]) == 2
        assert not (dataset / "refused").exists()
        assert "config error" in capsys.readouterr().err


class TestOverrides:
    def test_dotted_set(self):
        cfg = cli.apply_overrides({"train": {"lr0": 1}}, ["train.lr0=0.5", "net.hidden=4", "n_keep=3"], seed=7)
        assert cfg["train"]["lr0"] == 0.5 and cfg["net"]["hidden"] == 4 and cfg["n_keep"] == 3
        assert cfg["seed"] == 7

    def test_malformed_set(self):
        with pytest.raises(cli.ConfigError):
            cli.apply_overrides({}, ["novalue"])

    def test_hash_ignores_output_dir(self):
        assert cli.config_hash({"a": 1, "output_dir": "x"}) == cli.config_hash({"a": 1, "output_dir": "y"})
        assert cli.config_hash({"a": 1}) != cli.config_hash({"a": 2})


class TestPipelines:
    def test_interp_chain_and_rerun(self, dataset, capsys):
        assert cli.main(["run", interp_cfg(dataset), "--threads", "1"]) == 0
        man = json.loads((dataset / "train" / "manifest.json").read_text())
        assert set(man["artifacts"]) == {"interp.ckpt", "history.csv"}
        assert man["threads"] == 1 and man["seed"] == 0 and "numpy" in man["versions"]
        assert "timing.json" in man["volatile"]

        infer = write_cfg(dataset / "infer.json", {"experiment": "interp-infer", "dataset": "data",
                                                   "model": "train/interp.ckpt", "output_dir": "pred",
                                                   "n_keep": 4, "infer": {"epochs": 2}})
        lin = write_cfg(dataset / "lin.json", {"experiment": "linear-baseline", "dataset": "data",
                                               "output_dir": "lin", "n_keep": 4})
        met = write_cfg(dataset / "met.json", {"experiment": "metrics", "reference": "data",
                                               "predictions": {"geninr": "pred", "linear": "lin"},
                                               "output_dir": "met"})
        for c in (infer, lin, met):
            assert cli.main(["run", c]) == 0
        rows = list(csv.reader(open(dataset / "met" / "comparison.csv")))
        assert rows[0] == ["method", "MAE", "PSNR", "SSIM", "Dice", "ASSD", "HD"]
        assert [r[0] for r in rows[1:]] == ["geninr", "linear"]

        assert cli.main(["rerun", str(dataset / "train" / "manifest.json"), "--out",
                         str(dataset / "train2"), "--threads", "1"]) == 0
        assert "reproduced 2 artifacts" in capsys.readouterr().err

    def test_interp_eval_fractional(self, dataset):
        if not (dataset / "train" / "interp.ckpt").exists():
            assert cli.main(["run", interp_cfg(dataset)]) == 0
        cfg = write_cfg(dataset / "eval.json", {"experiment": "interp-eval", "dataset": "data",
                                                "model": "train/interp.ckpt", "output_dir": "ev",
                                                "z_positions": [0.5, 1.5, 2.5]})
        assert cli.main(["run", cfg]) == 0
        assert read_volume(next((dataset / "ev").glob("*.vol"))).dims == (16, 12, 3)

    def test_atlas_chain(self, dataset):
        small = {"iters": 4, "coords_per_subject": 200, "pretrain_epochs": 1, "pretrain_batch": 512,
                 "infer_epochs": 2, "log_every": 0}
        nets_kw = {"atlas": {"hidden": 8, "n_layers": 2}, "displacement": {"latent_dim": 8, "hidden": 8}}
        tr = write_cfg(dataset / "at.json", {"experiment": "atlas-train", "dataset": "data",
                                             "output_dir": "atlas", "train": small, **nets_kw})
        assert cli.main(["run", tr]) == 0
        rows = list(csv.reader(open(dataset / "atlas" / "report.csv")))
        assert rows[0][:3] == ["method", "subject", "ASSD"] and len(rows) == 5
        inf = write_cfg(dataset / "ai.json", {"experiment": "atlas-infer", "dataset": "data", "n_keep": 4,
                                              "atlas": "atlas/atlas.ckpt",
                                              "displacement": "atlas/displacement.ckpt",
                                              "output_dir": "ainf", "train": small})
        assert cli.main(["run", inf]) == 0
        pc = write_cfg(dataset / "pca.json", {"experiment": "latent-pca", "model": "atlas/displacement.ckpt",
                                              "dataset": "data", "output_dir": "pca", "k": 1})
        assert cli.main(["run", pc]) == 0
        assert (dataset / "pca" / "scatter.csv").exists()
        ab = write_cfg(dataset / "ab.json", {"experiment": "ablation-explicit", "dataset": "data", "n_keep": 4,
                                             "output_dir": "abl", "train": small, "explicit_lr": [0.05, 0.01],
                                             **nets_kw})
        assert cli.main(["run", ab]) == 0
        rows = list(csv.reader(open(dataset / "abl" / "atlas_ablation.csv")))
        assert [r[0] for r in rows[1:]] == ["implicit", "explicit"]

    def test_runtime_error_exit_1(self, dataset, tmp_path, capsys):
        (tmp_path / "junk.ckpt").write_bytes(b"junk\n")
        cfg = write_cfg(tmp_path / "c.json", {"experiment": "interp-infer", "dataset": str(dataset / "data"),
                                              "model": "junk.ckpt", "output_dir": "o"})
        assert cli.main(["run", cfg]) == 1
        assert "CheckpointError" in capsys.readouterr().err

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("NFA_THREADS", "2")
        assert cli.resolve_threads(None) == 2
        assert cli.resolve_threads(1) == 1
