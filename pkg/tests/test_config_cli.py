import json

import numpy as np
import pytest
from PIL import Image

from dpcl.cli import main
from dpcl.config import OUTPUT_ROOT_ENV, RunConfig, resolve_output
from dpcl.harness import normalize_sweep, run_sweep
from dpcl.utils import ConfigError


TINY = {
    "data": {
        "spec": {
            "height": 32, "width": 32, "num_classes": 4,
            "shapes_per_image": [2, 4], "shape_size": [8, 16],
        },
        "n_train": 24, "n_val": 6, "n_target": 4, "seed": 0,
    },
    "train": {
        "max_iters": 30, "warmup_epochs": 1, "batch_size": 8, "ssdp_epochs": 2,
        "eval_interval": 15, "checkpoint_interval": 100,
        "ssdp_channels": 16, "feature_dim": 16,
    },
}


def tiny_config_file(tmp_path, extra=None):
    cfg = json.loads(json.dumps(TINY))
    if extra:
        for key, val in extra.items():
            node = cfg
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = val
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestRunConfig:
    def test_roundtrip(self, tmp_path):
        cfg = RunConfig.from_dict(TINY)
        path = tmp_path / "cfg.json"
        cfg.save(path)
        again = RunConfig.from_file(path)
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"bogus": 1})

    def test_unknown_nested_key(self):
        bad = json.loads(json.dumps(TINY))
        bad["train"]["learning_rate_typo"] = 0.1
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)

    def test_unknown_spec_key(self):
        bad = json.loads(json.dumps(TINY))
        bad["data"]["spec"]["colors"] = 3
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)

    def test_override_valid(self):
        cfg = RunConfig.from_dict(TINY).with_overrides({"train.pp_weight": 3.0})
        assert cfg.train.pp_weight == 3.0

    def test_override_unknown_path(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(TINY).with_overrides({"train.not_a_knob": 1})

    def test_defaults_match_documented_values(self):
        cfg = RunConfig()
        assert cfg.train.lr0 == 1e-3
        assert cfg.train.momentum == 0.9
        assert cfg.train.weight_decay == 5e-4
        assert cfg.train.batch_size == 8
        assert cfg.train.poly_power == 0.9
        assert cfg.train.warmup_epochs == 10
        assert cfg.train.pp_weight == 5.0
        assert cfg.train.margin == 0.5
        assert cfg.train.temperature == 0.1
        assert cfg.train.ema_momentum == 0.999
        assert cfg.train.n_style_centers == 10
        assert cfg.train.n_per_class == 30
        assert cfg.tta.n_per_class == 1000
        assert cfg.tta.n_iters == 1
        assert cfg.data.spec.num_classes == 8
        assert cfg.data.n_train == 400


def test_resolve_output_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert resolve_output("runs/x") == tmp_path / "runs/x"
    assert resolve_output("/abs/path") == resolve_output("/abs/path")
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert str(resolve_output("runs/x")) == "runs/x"


class TestSweepSpec:
    def test_empty_gives_base_row(self):
        rows = normalize_sweep({})
        assert rows == [{"name": "base", "overrides": {}}]

    def test_grid_form(self):
        rows = normalize_sweep({"key": "train.pp_weight", "values": [3, 4, 5, 6, 7]})
        assert len(rows) == 5
        assert rows[0]["overrides"] == {"train.pp_weight": 3}

    def test_rows_form(self):
        rows = normalize_sweep({"rows": [{"name": "a", "overrides": {"train.use_div": False}}]})
        assert rows[0]["name"] == "a"

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            normalize_sweep({"keys": []})

    def test_unknown_override_fails_before_training(self):
        base = RunConfig.from_dict(TINY)
        with pytest.raises(ConfigError):
            run_sweep(base, {"key": "train.bogus", "values": [1]}, seeds=(0,))


def test_run_sweep_single_row_deterministic(tmp_path):
    base = RunConfig.from_dict(TINY).with_overrides({"train.use_ssdp": False, "train.max_iters": 16})
    a = run_sweep(base, {}, seeds=(0,), out_dir=tmp_path)
    b = run_sweep(base, {}, seeds=(0,))
    assert a.rows[0].seed_scores == b.rows[0].seed_scores
    assert (tmp_path / "sweep.csv").exists()
    assert (tmp_path / "sweep.txt").exists()
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert header.startswith("row,mean_target_miou")


class TestCli:
    def test_eval_perfect_oracle_masks(self, tmp_path, capsys):
        truth = tmp_path / "truth"
        truth.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            m = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
            Image.fromarray(m, mode="L").save(truth / f"{i:04d}.png")
        code = main(["eval", "--pred-masks", str(truth), "--true-masks", str(truth), "--classes", "4"])
        out = capsys.readouterr().out
        assert code == 0
        assert "mIoU 1.0000" in out

    def test_landscape_dispatch(self, tmp_path, capsys):
        code = main(["landscape", "--out", str(tmp_path / "ls"), "--grid-n", "32"])
        assert code == 0
        assert (tmp_path / "ls" / "landscape.csv").exists()
        assert (tmp_path / "ls" / "landscape.json").exists()
        summary = json.loads((tmp_path / "ls" / "landscape.json").read_text())
        assert summary["grid_n"] == 32

    def test_missing_dataset_exits_nonzero(self, tmp_path, capsys):
        code = main(["train-ssdp", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error" in capsys.readouterr().err.lower()

    def test_unknown_set_key_exits_nonzero(self, tmp_path, capsys):
        code = main(["generate-data", "--out", str(tmp_path / "d"), "--set", "train.bogus=1"])
        assert code == 1

    def test_full_pipeline(self, tmp_path, capsys):
        cfg = tiny_config_file(tmp_path)
        data_dir = tmp_path / "data"
        assert main(["generate-data", "--config", str(cfg), "--out", str(data_dir)]) == 0
        assert (data_dir / "manifest.json").exists()
        assert (data_dir / "source_train" / "images" / "0000.png").exists()
        assert (data_dir / "target_shift_a" / "masks" / "0003.png").exists()

        ssdp_dir = tmp_path / "ssdp"
        assert main(["train-ssdp", "--config", str(cfg), "--data", str(data_dir), "--out", str(ssdp_dir)]) == 0
        assert (ssdp_dir / "ssdp.ckpt").exists()

        seg_dir = tmp_path / "seg"
        assert main(["train-seg", "--config", str(cfg), "--data", str(data_dir),
                     "--ssdp", str(ssdp_dir / "ssdp.ckpt"), "--out", str(seg_dir)]) == 0
        assert (seg_dir / "seg.ckpt").exists()
        assert (seg_dir / "metrics.csv").exists()

        assert main(["eval", "--checkpoint", str(seg_dir / "seg.ckpt"), "--data", str(data_dir),
                     "--ssdp", str(ssdp_dir / "ssdp.ckpt")]) == 0
        out = capsys.readouterr().out
        assert "mean over targets" in out

        tta_csv = tmp_path / "tta.csv"
        assert main(["tta", "--checkpoint", str(seg_dir / "seg.ckpt"),
                     "--ssdp", str(ssdp_dir / "ssdp.ckpt"), "--data", str(data_dir),
                     "--out", str(tta_csv), "--modes", "none,C", "--iters", "1",
                     "--max-images", "2"]) == 0
        assert tta_csv.exists()
        lines = tta_csv.read_text().splitlines()
        assert lines[0] == "mode,n_iters,domain,image,miou"

    def test_train_seg_requires_ssdp_checkpoint(self, tmp_path, capsys):
        cfg = tiny_config_file(tmp_path)
        data_dir = tmp_path / "data"
        assert main(["generate-data", "--config", str(cfg), "--out", str(data_dir)]) == 0
        code = main(["train-seg", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "s")])
        assert code == 1
        assert "ssdp" in capsys.readouterr().err.lower()
