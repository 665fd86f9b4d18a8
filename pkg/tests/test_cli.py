"""CLI commands: config resolution, manifests, atomicity, exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fieldshift import containers
from fieldshift.cli import PRESETS, build_run_config, main, resolve_config
from fieldshift.errors import ConfigError

FAST_OVERRIDES = {
    "scene": {"scene_size_px": 176, "mean_field_diameter_px": 24},
    "train": {"epochs": 2, "batch_size": 4},
    "schedule": {"total_epochs": 2},
    "mc": {"trials": 2},
    "tiles": {"core_size": 88, "input_size": 104},
}


def write_config(tmp_path, name="config.json", **extra):
    cfg = {"preset": "desk", "seed": 5, **FAST_OVERRIDES, **extra}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def tree_digest(root, skip=("manifest.json",)):
    import hashlib

    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            rel = os.path.relpath(os.path.join(dirpath, f), root)
            if rel in skip:
                continue
            out[rel] = hashlib.sha256(open(os.path.join(dirpath, f), "rb").read()).hexdigest()
    return out


class TestConfigResolution:
    def test_preset_defaults_fill_in(self):
        resolved = resolve_config({"preset": "desk", "seed": 1})
        assert resolved["normalization"] == "mm-lab"
        assert resolved["arch"]["base_width"] == 8

    def test_overrides_deep_merge(self):
        resolved = resolve_config({"preset": "desk", "seed": 1, "arch": {"base_width": 4}})
        assert resolved["arch"]["base_width"] == 4
        assert resolved["arch"]["depth"] == 3

    def test_unknown_top_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            resolve_config({"preset": "desk", "seed": 1, "bogus": 1})

    def test_unknown_nested_key_rejected(self):
        resolved = resolve_config({"preset": "desk", "seed": 1, "arch": {"wings": 2}})
        with pytest.raises(ConfigError, match="arch"):
            build_run_config(resolved)

    def test_missing_seed_rejected(self):
        blob = {k: v for k, v in PRESETS["desk"].items() if k != "seed"}
        blob["preset"] = "desk"
        with pytest.raises(ConfigError, match="seed"):
            resolve_config({**blob, "seed": None})

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="preset"):
            resolve_config({"preset": "galaxy", "seed": 1})

    def test_xl_preset_builds(self):
        cfg = build_run_config(resolve_config({"preset": "xl", "seed": 1}))
        assert cfg.arch.downsample_factor == 32
        assert cfg.arch.widths() == [64, 128, 256, 512, 1024]
        assert cfg.mc.trials == 30
        assert cfg.schedule.initial_lr == 0.003
        assert cfg.schedule.power == 0.8
        assert cfg.train.epochs == 120


class TestSimulateCommand:
    def test_simulate_writes_scene_and_manifest(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "scene"
        assert main(["simulate", "--config", config, "--out", str(out)]) == 0
        assert (out / "scene.json").exists()
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["tool_version"]
        # manifest closure: every output file is digested
        digests = manifest["outputs"]
        for rel in tree_digest(out):
            assert rel in digests

    def test_simulate_deterministic(self, tmp_path):
        config = write_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", config, "--out", str(a)]) == 0
        assert main(["simulate", "--config", config, "--out", str(b)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_existing_out_dir_rejected(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "scene"
        out.mkdir()
        assert main(["simulate", "--config", config, "--out", str(out)]) == 2

    def test_invalid_config_exit_code_and_json_stderr(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"preset": "desk", "seed": 1, "scene": {"field_density": 7}}))
        code = main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 2
        err = capsys.readouterr().err
        blob = json.loads(err.strip().splitlines()[-1])
        assert blob["error"] == "ConfigError"
        assert "field_density" in blob["message"]

    def test_failed_simulate_leaves_no_partial_dir(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({
            "preset": "desk", "seed": 1, **FAST_OVERRIDES,
            "train": {"epochs": 2, "batch_size": 4, "chip_size": 39},  # odd window
        }))
        out = tmp_path / "scene"
        code = main(["simulate", "--config", str(bad), "--out", str(out)])
        assert code == 2
        assert not out.exists()
        assert not list(tmp_path.glob("scene.partial-*"))


@pytest.fixture(scope="module")
def scene_and_train(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_flow")
    config = write_config(base)
    scene = base / "scene"
    assert main(["simulate", "--config", config, "--out", str(scene)]) == 0
    train_cfg = write_config(base, name="train.json", scene_dir=str(scene))
    train = base / "train"
    assert main(["train", "--config", train_cfg, "--out", str(train)]) == 0
    return base, config, scene, train


class TestTrainCommand:
    def test_training_log_rows_equal_epochs(self, scene_and_train):
        _, _, _, train = scene_and_train
        lines = (train / "training_log.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 2  # header + epochs

    def test_checkpoint_readable_with_meta(self, scene_and_train):
        _, _, _, train = scene_and_train
        tensors, meta = containers.read_checkpoint(str(train / "checkpoint.fsnw"))
        assert meta["norm"] == "mm-lab"
        assert meta["best_epoch"] >= 0
        assert tensors

    def test_zero_epoch_checkpoint_equals_initialization(self, tmp_path):
        config = write_config(tmp_path)
        scene = tmp_path / "scene"
        assert main(["simulate", "--config", config, "--out", str(scene)]) == 0
        zcfg = write_config(tmp_path, name="zero.json", scene_dir=str(scene),
                            train={"epochs": 0, "batch_size": 4})
        out = tmp_path / "train0"
        assert main(["train", "--config", zcfg, "--out", str(out)]) == 0
        tensors, _ = containers.read_checkpoint(str(out / "checkpoint.fsnw"))
        from fieldshift.network import init_params
        cfg = build_run_config(resolve_config(json.loads(open(zcfg).read())))
        init = init_params(cfg.arch, seed=cfg.seed, dtype=np.float32)
        for k, v in init.tensors.items():
            assert np.array_equal(tensors[k], v.astype(np.float32))

    def test_train_without_scene_dir_rejected(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["train", "--config", config, "--out", str(tmp_path / "t")]) == 2


class TestPredictEvaluate:
    def test_predict_emits_all_years_and_layers(self, scene_and_train, tmp_path):
        base, _, scene, train = scene_and_train
        pcfg = write_config(tmp_path, name="pred.json", scene_dir=str(scene),
                            checkpoint=str(train / "checkpoint.fsnw"))
        out = tmp_path / "pred"
        assert main(["predict", "--config", pcfg, "--out", str(out)]) == 0
        for year in ("y0", "y1", "y2"):
            for layer in ("mean.fsch", "std.fsch", "entropy.fsch", "mutual_info.fsch",
                          "hardened.fsmk", "quicklook_interior.png", "quicklook_mask.png"):
                assert (out / year / layer).exists(), f"{year}/{layer}"

    def test_rate_zero_trials_collapse(self, scene_and_train, tmp_path):
        base, _, scene, train = scene_and_train
        outs = []
        for trials in (1, 5):
            pcfg = write_config(
                tmp_path, name=f"p{trials}.json", scene_dir=str(scene),
                checkpoint=str(train / "checkpoint.fsnw"),
                mc={"trials": trials, "inference_dropout_rate": 0.0},
            )
            out = tmp_path / f"pred{trials}"
            assert main(["predict", "--config", pcfg, "--out", str(out)]) == 0
            outs.append(out)
        a = containers.read_chip(str(outs[0] / "y0" / "mean.fsch"))
        b = containers.read_chip(str(outs[1] / "y0" / "mean.fsch"))
        assert np.array_equal(a.data, b.data)

    def test_arch_mismatch_is_checkpoint_error(self, scene_and_train, tmp_path):
        base, _, scene, train = scene_and_train
        pcfg = write_config(tmp_path, name="bad_arch.json", scene_dir=str(scene),
                            checkpoint=str(train / "checkpoint.fsnw"),
                            arch={"base_width": 16})
        code = main(["predict", "--config", pcfg, "--out", str(tmp_path / "bad")])
        assert code == 3

    def test_evaluate_writes_reports(self, scene_and_train, tmp_path):
        base, _, scene, train = scene_and_train
        pcfg = write_config(tmp_path, name="pe.json", scene_dir=str(scene),
                            checkpoint=str(train / "checkpoint.fsnw"))
        pred = tmp_path / "pred_eval"
        assert main(["predict", "--config", pcfg, "--out", str(pred)]) == 0
        ecfg = write_config(tmp_path, name="ev.json", scene_dir=str(scene),
                            prediction_dir=str(pred))
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", ecfg, "--out", str(out)]) == 0
        for name in ("rows.csv", "by_run.csv", "by_year.csv", "by_tile.csv"):
            assert (out / name).exists()
        rows = (out / "rows.csv").read_text().strip().split("\n")
        # 3 years x 4 core tiles + header
        assert len(rows) == 1 + 12


class TestManifestRerun:
    def test_rerun_from_manifest_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        a = tmp_path / "a"
        assert main(["simulate", "--config", config, "--out", str(a)]) == 0
        b = tmp_path / "b"
        assert main(["simulate", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_threads_do_not_change_outputs(self, scene_and_train, tmp_path):
        base, _, scene, train = scene_and_train
        pcfg = write_config(tmp_path, name="pt.json", scene_dir=str(scene),
                            checkpoint=str(train / "checkpoint.fsnw"),
                            mc={"trials": 4, "inference_dropout_rate": 0.2})
        one = tmp_path / "one"
        four = tmp_path / "four"
        assert main(["predict", "--config", pcfg, "--threads", "1", "--out", str(one)]) == 0
        assert main(["predict", "--config", pcfg, "--threads", "4", "--out", str(four)]) == 0
        assert tree_digest(one) == tree_digest(four)


class TestAblateCommand:
    def test_degenerate_single_cell_matrix(self, tmp_path):
        config = write_config(
            tmp_path,
            ablate={"cells": [{"name": "solo", "overrides": {"train": {"dropout_regime": "none"}}}]},
        )
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", config, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["extra"]["cells"]["solo"]["status"] == "ok"
        rows = (out / "reports" / "rows.csv").read_text()
        assert "solo" in rows

    def test_failed_cell_recorded_bundle_completes(self, tmp_path):
        config = write_config(
            tmp_path,
            ablate={
                "cells": [
                    {"name": "ok_cell", "overrides": {"train": {"dropout_regime": "none"}}},
                    {"name": "broken", "overrides": {"normalization": "zz-zz"}},
                ]
            },
        )
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", config, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["extra"]["partial_results"] is True
        assert manifest["extra"]["cells"]["broken"]["status"] == "failed"
        assert manifest["extra"]["cells"]["ok_cell"]["status"] == "ok"

    def test_cell_names_appear_in_reports(self, tmp_path):
        config = write_config(
            tmp_path,
            ablate={"cells": [
                {"name": "alpha", "overrides": {"train": {"dropout_regime": "none"}}},
                {"name": "beta", "overrides": {"train": {"dropout_regime": "train"}}},
            ]},
        )
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", config, "--out", str(out)]) == 0
        by_run = (out / "reports" / "by_run.csv").read_text()
        body_runs = [ln.split(",")[0] for ln in by_run.strip().split("\n")[1:]]
        assert body_runs == ["alpha", "beta"]


def test_console_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "fieldshift.cli"],
        capture_output=True, text=True,
    )
    assert proc.returncode != 0  # no command given
    proc = subprocess.run(
        [sys.executable, "-c", "from fieldshift.cli import main; raise SystemExit(main(['simulate', '--help']))"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "--config" in proc.stdout
