import json

import numpy as np
import pytest

from deacl.attack import AttackConfig
from deacl.config import child_seed, config_hash, parse_fraction
from deacl.distill import Stage2Config
from deacl.evaluate import EvalConfig
from deacl.models import EncoderConfig, ProjectorConfig
from deacl.pipeline import (DatasetSpec, RunConfig, load_run_config,
                            resolve_dataset, run_config_from_dict,
                            run_pipeline)
from deacl.pretrain import Stage1Config


def tiny_run_config(master_seed=0, out_dir="runs/x"):
    return RunConfig(
        dataset=DatasetSpec(n_per_class=6, n_per_class_test=4, num_classes=2),
        stage1=Stage1Config(epochs=1, batch_size=8,
                            encoder=EncoderConfig(in_shape=(1, 16, 16), widths=(4, 4), rep_dim=8),
                            projector=ProjectorConfig(hidden=8, out_dim=8)),
        stage2=Stage2Config(epochs=1, batch_size=8,
                            attack=AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=1,
                                                objective="cosine-to-target")),
        eval=EvalConfig(epochs=2, lr=0.1,
                        attack=AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=1,
                                            random_start=True, objective="cross-entropy")),
        master_seed=master_seed,
        out_dir=out_dir,
    )


class TestConfigUtilities:
    def test_parse_fraction(self):
        assert parse_fraction("8/255") == pytest.approx(8 / 255)
        assert parse_fraction("0.1") == 0.1
        assert parse_fraction(0.25) == 0.25

    def test_child_seed_disjoint_and_stable(self):
        a = child_seed(0, "stage1")
        b = child_seed(0, "stage2")
        assert a != b
        assert a == child_seed(0, "stage1")
        assert child_seed(1, "stage1") != a

    def test_config_hash_insensitive_to_identity(self):
        assert tiny_run_config().hash() == tiny_run_config().hash()

    def test_config_hash_sensitive_to_values(self):
        a = tiny_run_config(master_seed=0)
        b = tiny_run_config(master_seed=1)
        assert a.hash() != b.hash()

    def test_run_id_embeds_seed(self):
        rc = tiny_run_config(master_seed=7)
        assert rc.run_id().endswith("-s7")
        assert rc.run_id().startswith(rc.hash()[:10])

    def test_resolved_pushes_child_seeds(self):
        rc = tiny_run_config(master_seed=5)
        r = rc.resolved()
        assert r.stage1.seed == child_seed(5, "stage1")
        assert r.stage2.seed == child_seed(5, "stage2")
        assert rc.stage1.seed != r.stage1.seed  # original untouched


class TestConfigLoading:
    def test_round_trip_through_json(self, tmp_path):
        raw = {
            "dataset": {"n_per_class": 6, "num_classes": 2},
            "stage2": {"epochs": 3, "attack": {"epsilon": "4/255", "steps": 2}},
            "master_seed": 9,
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(raw))
        rc = load_run_config(path)
        assert rc.dataset.n_per_class == 6
        assert rc.stage2.epochs == 3
        assert rc.stage2.attack.epsilon == pytest.approx(4 / 255)
        assert rc.master_seed == 9

    def test_unknown_top_level_field_rejected(self):
        with pytest.raises(ValueError):
            run_config_from_dict({"stage3": {}})

    def test_unknown_nested_field_rejected(self):
        with pytest.raises(ValueError):
            run_config_from_dict({"stage2": {"lr_schedule": "step"}})


class TestDatasetResolution:
    def test_synthetic_split_seeds_differ(self):
        train, test = resolve_dataset(DatasetSpec(n_per_class=4, n_per_class_test=4, num_classes=2))
        assert len(train) == 8 and len(test) == 8
        assert not np.array_equal(train.images, test.images)
        assert train.split == "train" and test.split == "test"

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            resolve_dataset(DatasetSpec(source="imagenet"))


class TestRunPipeline:
    def test_artifacts_written(self, tmp_path):
        rc = tiny_run_config(out_dir=str(tmp_path / "run"))
        result = run_pipeline(rc)
        out = tmp_path / "run"
        for name in ("config.json", "stage1.ckpt", "stage2.ckpt",
                     "stage1_loss.csv", "stage2_loss.csv", "metrics.csv", "timing.csv"):
            assert (out / name).exists(), name
        assert result["run_id"] == rc.run_id()
        head = (out / "metrics.csv").read_text().splitlines()
        assert head[0] == "run_id,protocol,SA,RA,AA_proxy,eps,steps,restarts,seed,config_hash"
        assert len(head) == 2
        assert rc.hash() in head[1]

    def test_metrics_csv_byte_identical_across_reruns(self, tmp_path):
        rc = tiny_run_config(out_dir=str(tmp_path / "a"))
        run_pipeline(rc)
        rc2 = tiny_run_config(out_dir=str(tmp_path / "a"))  # same hash either way
        run_pipeline(rc2, out_dir=str(tmp_path / "b"))
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_timing_csv_has_phase_rows(self, tmp_path):
        rc = tiny_run_config(out_dir=str(tmp_path / "run"))
        run_pipeline(rc)
        lines = (tmp_path / "run" / "timing.csv").read_text().splitlines()
        phases = {l.split(",")[1] for l in lines[1:]}
        assert {"stage1_seconds", "stage2_seconds", "finetune_seconds",
                "stage2_attack_seconds", "stage2_update_seconds"} <= phases

    def test_saved_config_reloads_to_same_hash(self, tmp_path):
        rc = tiny_run_config(out_dir=str(tmp_path / "run"))
        run_pipeline(rc)
        back = load_run_config(tmp_path / "run" / "config.json")
        assert back.hash() == rc.hash()
