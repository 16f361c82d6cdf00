"""Run orchestration: config plumbing, checkpoints, and artifact layout."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from promptcl.errors import ConfigError, TrainingError
from promptcl.harness import (
    DataConfig,
    PretrainConfig,
    RunConfig,
    build_stream,
    config_hash,
    load_config,
    load_run_checkpoint,
    obtain_backbone,
    resolve_run_dir,
    run_experiment,
    save_run_checkpoint,
)
from promptcl.metrics import load_matrix_csv
from promptcl.optim import OptimSettings
from promptcl.pool import PromptPool
from promptcl.train import evaluate
from promptcl.vit import Backbone, ClassifierHead, ViTConfig


def tiny_run_config(seed=0, **overrides) -> RunConfig:
    base = dict(
        seed=seed,
        pool_size=4,
        expansion_ratio=0.5,
        epochs=2,
        patience=0,
        batch_size=16,
        optim=OptimSettings(lr=1e-3, warmup_epochs=0),
        pretrain=PretrainConfig(epochs=2, patience=0, accuracy_floor=0.05,
                                stop_accuracy=None, n_train=60, n_val=30,
                                batch_size=16),
        data=DataConfig(num_domains=3, n_per_domain=60, image_size=16,
                        stage_order=(0, 1, 2)),
        vit=ViTConfig(image_size=16, patch_size=8, channels=3, dim=16, depth=2,
                      heads=2, mlp_ratio=2.0, num_classes=3, prompt_layers=(0, 1)),
    )
    base.update(overrides)
    return RunConfig(**base)


STAGE_ARTIFACTS = (
    "config_echo.json", "status.json", "pretrain_log.csv", "epoch_log.csv",
    "accuracy_matrix.csv", "f1_matrix.csv", "metrics.json",
    "stage_similarity.csv", "backbone.bin",
)


class TestConfigValidation:
    def test_post_init_guards(self):
        with pytest.raises(ConfigError):
            tiny_run_config(pool_size=0)
        with pytest.raises(ConfigError):
            tiny_run_config(expansion_ratio=1.5)
        with pytest.raises(ConfigError):
            tiny_run_config(readout="mean")
        with pytest.raises(ConfigError):
            tiny_run_config(avg_acc_form="median")
        with pytest.raises(ConfigError):
            tiny_run_config(expansion_sweep=(0.0,))
        with pytest.raises(ConfigError):
            PretrainConfig(accuracy_floor=0.0)

    def test_image_size_must_agree(self):
        with pytest.raises(ConfigError, match="image_size"):
            tiny_run_config(data=DataConfig(image_size=32))


class TestConfigSerialization:
    def test_round_trip_preserves_everything(self):
        cfg = tiny_run_config(expansion_sweep=(0.25, 0.5))
        back = RunConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)

    def test_to_dict_is_json_compatible(self):
        blob = json.dumps(tiny_run_config().to_dict(), sort_keys=True)
        assert RunConfig.from_dict(json.loads(blob)) == tiny_run_config()

    def test_unknown_top_level_key_names_root(self):
        with pytest.raises(ConfigError, match="<root>"):
            RunConfig.from_dict({"pool_sizes": 8})

    def test_unknown_nested_key_names_the_section(self):
        with pytest.raises(ConfigError, match="vit"):
            RunConfig.from_dict({"vit": {"dims": 16}})

    def test_bad_nested_value_names_the_section(self):
        with pytest.raises(ConfigError, match="vit"):
            RunConfig.from_dict({"vit": {"image_size": 30, "patch_size": 8}})

    def test_non_object_section(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"vit": 5})

    def test_load_config_file(self, tmp_path):
        cfg = tiny_run_config(seed=9)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_config(str(path)) == cfg

    def test_load_config_rejects_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(str(path))


class TestRunDirResolution:
    def test_explicit_dir_wins(self):
        assert resolve_run_dir(tiny_run_config(), "/tmp/somewhere") == Path("/tmp/somewhere")

    def test_hash_named_default_under_env_root(self, monkeypatch, tmp_path):
        monkeypatch.setenv("PCL_RUN_DIR", str(tmp_path))
        cfg = tiny_run_config()
        got = resolve_run_dir(cfg)
        assert got == tmp_path / f"run_{config_hash(cfg)}"

    def test_hash_is_short_stable_hex(self):
        h = config_hash(tiny_run_config())
        assert len(h) == 10 and int(h, 16) >= 0
        assert h == config_hash(tiny_run_config())
        assert h != config_hash(tiny_run_config(seed=1))


class TestCheckpointGlue:
    def test_backbone_only_round_trip(self, tmp_path):
        cfg = tiny_run_config()
        bb = Backbone(cfg.vit, seed=3)
        bb.freeze()
        head = ClassifierHead(cfg.vit.dim, cfg.vit.num_classes, seed=3)
        path = tmp_path / "bb.bin"
        save_run_checkpoint(path, cfg, bb, head, pool=None, completed_stage=None)
        state = load_run_checkpoint(path)
        assert state.config == cfg
        assert state.pool is None
        assert state.completed_stage is None
        assert state.backbone.frozen
        for name, t in bb.state_items():
            assert np.array_equal(state.backbone.params[name].numpy(), t.numpy())
        assert np.array_equal(state.head.w.numpy(), head.w.numpy())

    def test_pool_round_trip_keeps_freeze_structure(self, tmp_path):
        cfg = tiny_run_config()
        bb = Backbone(cfg.vit, seed=3)
        head = ClassifierHead(cfg.vit.dim, cfg.vit.num_classes, seed=3)
        pool = PromptPool(4, cfg.vit.dim, expansion_ratio=0.5, seed=3)
        pool.expand(1)
        path = tmp_path / "run.bin"
        save_run_checkpoint(path, cfg, bb, head, pool, completed_stage=1)
        state = load_run_checkpoint(path)
        assert state.completed_stage == 1
        assert state.rng_state is not None
        got = state.pool
        assert [g.stage_id for g in got.groups] == [0, 1]
        assert [g.frozen for g in got.groups] == [True, False]
        for a, b in zip(got.groups, pool.groups):
            assert np.array_equal(a.keys.numpy(), b.keys.numpy())
            assert np.array_equal(a.values.numpy(), b.values.numpy())

    def test_obtain_backbone_from_checkpoint(self, tmp_path):
        cfg = tiny_run_config()
        run_dir = tmp_path / "pre"
        run_dir.mkdir()
        bb, head, log = obtain_backbone(cfg, run_dir)
        assert log and bb.frozen
        assert (run_dir / "backbone.bin").exists()
        assert (run_dir / "pretrain_log.csv").exists()

        loaded_cfg = replace(cfg, backbone_checkpoint=str(run_dir / "backbone.bin"))
        bb2, head2, log2 = obtain_backbone(loaded_cfg, None)
        assert log2 == []
        assert bb2.frozen
        for name, t in bb.state_items():
            assert np.array_equal(bb2.params[name].numpy(), t.numpy())
        assert np.array_equal(head2.w.numpy(), head.w.numpy())

    def test_checkpoint_backbone_shape_mismatch(self, tmp_path):
        cfg = tiny_run_config()
        run_dir = tmp_path / "pre"
        run_dir.mkdir()
        obtain_backbone(cfg, run_dir)
        other = tiny_run_config(
            vit=ViTConfig(image_size=16, patch_size=8, channels=3, dim=16, depth=3,
                          heads=2, mlp_ratio=2.0, num_classes=3, prompt_layers=(0, 1)),
            backbone_checkpoint=str(run_dir / "backbone.bin"))
        with pytest.raises(ConfigError, match="backbone"):
            obtain_backbone(other, None)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("runs") / "tiny"
    cfg = tiny_run_config()
    result = run_experiment(cfg, run_dir=str(run_dir))
    return cfg, Path(result["run_dir"]), result


class TestRunExperiment:
    def test_artifacts_exist(self, finished_run):
        _, run_dir, result = finished_run
        for name in STAGE_ARTIFACTS:
            assert (run_dir / name).exists(), name
        for stage in range(3):
            assert (run_dir / f"checkpoint_stage_{stage}.bin").exists()
        assert json.loads((run_dir / "status.json").read_text()) == {"status": "complete"}

    def test_config_echo_matches(self, finished_run):
        cfg, run_dir, _ = finished_run
        assert json.loads((run_dir / "config_echo.json").read_text()) == cfg.to_dict()

    def test_matrices_and_metrics_agree_with_files(self, finished_run):
        _, run_dir, result = finished_run
        acc = load_matrix_csv(run_dir / "accuracy_matrix.csv")
        assert acc.shape == (3, 3)
        assert np.array_equal(acc, result["accuracy_matrix"])
        disk_metrics = json.loads((run_dir / "metrics.json").read_text())
        assert disk_metrics == result["metrics"]
        assert set(disk_metrics) == {"avg_acc", "faa", "bwt", "avg_f"}
        f1 = load_matrix_csv(run_dir / "f1_matrix.csv")
        assert f1.shape == (3, 3)
        assert np.all((f1 >= 0) & (f1 <= 1))

    def test_similarity_matrix_tracks_stages(self, finished_run):
        _, run_dir, result = finished_run
        sim = load_matrix_csv(run_dir / "stage_similarity.csv")
        assert sim.shape == (3, 3)
        assert np.array_equal(sim, result["stage_similarity"])

    def test_epoch_log_covers_all_stages(self, finished_run):
        _, run_dir, _ = finished_run
        lines = (run_dir / "epoch_log.csv").read_text().strip().split("\n")
        assert lines[0] == "stage,epoch,train_loss,val_acc"
        stages = {int(ln.split(",")[0]) for ln in lines[1:]}
        assert stages == {0, 1, 2}

    def test_stage_checkpoint_replays_evaluation(self, finished_run):
        cfg, run_dir, result = finished_run
        state = load_run_checkpoint(run_dir / "checkpoint_stage_2.bin")
        stream = build_stream(state.config)
        acc, _ = evaluate(state.pool, state.backbone, state.head, stream.test_set(0),
                          batch_size=max(cfg.batch_size, 64), readout=cfg.readout)
        assert acc == result["accuracy_matrix"][2, 0]

    def test_identical_configs_reproduce_bitwise(self, tmp_path):
        cfg = tiny_run_config(seed=4)
        a = run_experiment(cfg, run_dir=str(tmp_path / "a"))
        b = run_experiment(cfg, run_dir=str(tmp_path / "b"))
        for name in ("accuracy_matrix.csv", "f1_matrix.csv", "metrics.json",
                     "stage_similarity.csv", "epoch_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert np.array_equal(a["accuracy_matrix"], b["accuracy_matrix"])

    def test_zero_ratio_never_expands(self, tmp_path):
        cfg = tiny_run_config(expansion_ratio=0.0)
        result = run_experiment(cfg, run_dir=str(tmp_path / "flat"))
        assert result["stage_similarity"].shape == (1, 1)
        state = load_run_checkpoint(Path(result["run_dir"]) / "checkpoint_stage_2.bin")
        assert state.pool.num_stages == 1

    def test_failure_is_recorded_in_status(self, tmp_path):
        cfg = tiny_run_config(
            optim=OptimSettings(lr=0.0, warmup_epochs=0),
            pretrain=PretrainConfig(epochs=1, patience=0, accuracy_floor=1.0,
                                    stop_accuracy=None, n_train=60, n_val=30,
                                    batch_size=16))
        run_dir = tmp_path / "doomed"
        with pytest.raises(TrainingError):
            run_experiment(cfg, run_dir=str(run_dir))
        status = json.loads((run_dir / "status.json").read_text())
        assert status["status"] == "failed"
        assert status["error"].startswith("TrainingError")
        assert (run_dir / "config_echo.json").exists()


class TestSweep:
    def test_sweep_produces_table_and_subruns(self, tmp_path):
        cfg = tiny_run_config(expansion_sweep=(0.25, 0.5))
        result = run_experiment(cfg, run_dir=str(tmp_path / "sweep"))
        run_dir = Path(result["run_dir"])
        csv = (run_dir / "expansion_sweep.csv").read_text().strip().split("\n")
        assert csv[0] == "ratio,prompts_added_per_stage,avg_acc,faa,bwt,avg_f"
        assert len(csv) == 3
        assert csv[1].startswith("0.25,1,")  # round-half-up of 0.25 * 4
        assert csv[2].startswith("0.5,2,")
        # one shared backbone, pretrained exactly once at the sweep root
        assert (run_dir / "backbone.bin").exists()
        for ratio in ("0.25", "0.5"):
            sub = run_dir / f"rho_{ratio}"
            assert json.loads((sub / "status.json").read_text()) == {"status": "complete"}
            assert (sub / "accuracy_matrix.csv").exists()
            assert not (sub / "pretrain_log.csv").exists()
        assert [row["ratio"] for row in result["table"]] == [0.25, 0.5]
