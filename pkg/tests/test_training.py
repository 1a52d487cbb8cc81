import json

import numpy as np
import pytest

from cuenav import training as tr
from cuenav.autograd import read_checkpoint
from cuenav.autograd.checkpoint import CheckpointError
from cuenav.autograd import functional as F
from cuenav.cli import TABLE1, TABLE2, ExperimentConfig, grid_run_config
from cuenav.training import (HEAD_PARAMS, LineDataset, RunConfig, TrainingDiverged, build_bundle, evaluate_head,
                             evaluate_masks, is_validation, load_bundle, make_pool, split_dataset,
                             stage1_parameters, train_stage1, train_stage2, validation_images)
from cuenav.worldgen import CollectConfig, collect_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    collect_dataset(3, 4, root, config=CollectConfig(n_worlds=3, samples_per_world=4, resolution=32, seed=2))
    return LineDataset.load(root)


def small(**kw) -> RunConfig:
    base = dict(resolution=32, base_channels=4, epochs1=1, epochs2=1, batch_size=4, tl_batch=2, pool_size=8)
    base.update(kw)
    return RunConfig(**base)


def arrays_equal(a: dict, b: dict, prefix=()) -> bool:
    keys = [k for k in a if k.startswith(prefix)] if prefix else list(a)
    return all(np.array_equal(a[k], b[k]) for k in keys)


class TestRunConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown run config keys"):
            RunConfig.from_dict({"epochs": 3})

    def test_round_trip(self):
        cfg = small(triplet=True, tl_weight=0.5)
        from dataclasses import asdict
        assert RunConfig.from_dict(json.loads(json.dumps(asdict(cfg)))) == cfg

    def test_every_table_row_expressible(self):
        cfg = ExperimentConfig()
        rows = {row: grid_run_config(cfg, run, sw) for row, (run, sw) in TABLE1.items()}
        assert len(rows) == 9
        assert not rows["Vanilla"].augment.enabled
        assert rows["DS"].deep_supervision and not rows["DS"].triplet
        assert rows["DS with TL"].tl_active
        for row, (run, head) in TABLE2.items():
            sw = next(s for r, s in TABLE1.values() if r == run)
            assert grid_run_config(cfg, run, sw, head).head == head
        assert TABLE2["DS + TL + W/O Abs"][1] == "velocity"

    def test_stage1_key_ignores_head(self):
        assert small(head="waypoint").stage1_key() == small(head="velocity", name="x").stage1_key()
        assert small().stage1_key() != small(seed=1).stage1_key()


class TestSplit:
    def test_fraction_and_stability(self):
        flags = np.array([is_validation(i) for i in range(10_000)])
        assert 0.08 < flags.mean() < 0.12
        assert all(is_validation(i) == f for i, f in zip(range(100), flags[:100]))

    def test_disjoint(self, dataset):
        train, val = split_dataset(dataset)
        assert len(train) + len(val) == len(dataset)
        assert not set(train.index) & set(val.index)


class TestStage1:
    def test_zero_epochs_is_initialization(self, dataset, tmp_path):
        cfg = small(epochs1=0)
        train_stage1(cfg, tmp_path, dataset)
        saved, meta = read_checkpoint(tmp_path / "stage1.ckpt")
        init = {k: v.data for k, v in build_bundle(cfg).named_parameters() if not k.startswith(HEAD_PARAMS)}
        assert set(saved) == set(init)
        assert arrays_equal(saved, init)
        assert meta["stage"] == 1

    def test_bit_identical_checkpoints(self, dataset, tmp_path):
        cfg = small(backgrounds="scene", brightness=0.5, deep_supervision=True, triplet=True)
        train_stage1(cfg, tmp_path / "a", dataset)
        train_stage1(cfg, tmp_path / "b", dataset)
        assert (tmp_path / "a" / "stage1.ckpt").read_bytes() == (tmp_path / "b" / "stage1.ckpt").read_bytes()
        assert (tmp_path / "a" / "curves_stage1.csv").read_bytes() == (tmp_path / "b" / "curves_stage1.csv").read_bytes()

    def test_outputs(self, dataset, tmp_path):
        train_stage1(small(epochs1=2, checkpoint_every=1), tmp_path, dataset)
        header = (tmp_path / "curves_stage1.csv").read_text().splitlines()
        assert header[0] == "stage,epoch,train_loss,val_loss,val_iou,val_rmse"
        assert len(header) == 3
        assert (tmp_path / "stage1_epoch001.ckpt").exists()
        assert json.loads((tmp_path / "timing_stage1.json").read_text())["cpu_seconds"] > 0

    def test_triplet_trains_feature_blocks(self, dataset, tmp_path):
        cfg = small(triplet=True, backgrounds="scene")
        names = {id(p) for p in stage1_parameters(build_bundle(cfg), cfg)}
        assert len(names) > len(stage1_parameters(build_bundle(small()), small()))
        train_stage1(cfg, tmp_path, dataset)
        saved, _ = read_checkpoint(tmp_path / "stage1.ckpt")
        init = {k: v.data for k, v in build_bundle(cfg).named_parameters()}
        for prefix in ("waypoint.block5.", "waypoint.block6.", "encoder."):
            assert not arrays_equal(saved, init, prefix), prefix

    def test_without_triplet_feature_blocks_untouched(self, dataset, tmp_path):
        cfg = small(backgrounds="scene")
        train_stage1(cfg, tmp_path, dataset)
        saved, _ = read_checkpoint(tmp_path / "stage1.ckpt")
        init = {k: v.data for k, v in build_bundle(cfg).named_parameters()}
        assert arrays_equal(saved, init, "waypoint.block5.")
        assert not arrays_equal(saved, init, "encoder.")

    def test_zero_weight_triplet_is_inert(self, dataset, tmp_path):
        train_stage1(small(triplet=True, tl_weight=0.0), tmp_path / "a", dataset)
        train_stage1(small(triplet=False), tmp_path / "b", dataset)
        a, _ = read_checkpoint(tmp_path / "a" / "stage1.ckpt")
        b, _ = read_checkpoint(tmp_path / "b" / "stage1.ckpt")
        assert arrays_equal(a, b)

    def test_nan_loss_names_batch(self, dataset, tmp_path, monkeypatch):
        monkeypatch.setattr(tr, "wbce_loss", lambda pred, lab, beta: F.mul(F.sum(pred), float("nan")))
        with pytest.raises(TrainingDiverged, match=r"stage 1, epoch 1, step 0 \(batch seed: root 0"):
            train_stage1(small(), tmp_path, dataset)

    def test_empty_training_split(self, dataset, tmp_path):
        _, val = split_dataset(dataset)
        with pytest.raises(ValueError, match="empty"):
            train_stage1(small(), tmp_path, val)

    def test_smoothed_loss_decreases(self, dataset, tmp_path):
        res = train_stage1(small(epochs1=5), tmp_path, dataset)
        losses = np.array([r["train_loss"] for r in res["curves"].rows])
        smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
        assert np.all(np.diff(smooth) < 0)

    def test_overfits_ten_samples(self, dataset, tmp_path):
        # the bottleneck decoder cannot draw a 1-2 px line from a 2x2 map, so capacity is checked with DS
        train, val = split_dataset(dataset)
        few = LineDataset(np.concatenate([train.images[:10], val.images]), np.concatenate([train.masks[:10], val.masks]),
                          np.concatenate([train.w[:10], val.w]), np.concatenate([train.v[:10], val.v]),
                          np.concatenate([train.index[:10], val.index]))
        cfg = small(base_channels=8, deep_supervision=True, epochs1=200, batch_size=2, lr=3e-3)
        res = train_stage1(cfg, tmp_path, few)
        fit, _ = split_dataset(few)
        _, iou, _ = evaluate_masks(res["bundle"], fit.images, fit.masks, cfg.beta)
        assert len(fit) == 10
        assert iou >= 0.95


@pytest.fixture(scope="module")
def stage1_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    cfg = small(backgrounds="scene", brightness=0.5, deep_supervision=True, triplet=True)
    train_stage1(cfg, out, dataset)
    return cfg, out / "stage1.ckpt"


class TestStage2:
    def test_encoder_frozen(self, dataset, stage1_run, tmp_path):
        cfg, ckpt = stage1_run
        train_stage2(cfg, ckpt, tmp_path, dataset)
        before, _ = read_checkpoint(ckpt)
        after, meta = read_checkpoint(tmp_path / "stage2.ckpt")
        assert arrays_equal(before, after, "encoder.")
        assert arrays_equal(before, after, "mask.")
        assert not arrays_equal(before, after, "waypoint.block5.")
        assert meta["head"] == "waypoint"

    def test_zero_epochs_keeps_decoder(self, dataset, stage1_run, tmp_path):
        cfg, ckpt = stage1_run
        cfg0 = RunConfig.from_dict({**cfg.__dict__, "epochs2": 0})
        train_stage2(cfg0, ckpt, tmp_path, dataset)
        after, _ = read_checkpoint(tmp_path / "stage2.ckpt")
        before, _ = read_checkpoint(ckpt)
        init = {k: v.data for k, v in build_bundle(cfg0).named_parameters()}
        assert arrays_equal(before, after, "waypoint.block")
        assert arrays_equal(init, after, "waypoint.fc")
        # only the fixed standardisation buffers were set before the first epoch
        assert not arrays_equal(init, after, "waypoint.scaling.")

    def test_overfits_waypoints(self, dataset, tmp_path):
        cfg = small(epochs1=0, epochs2=150, batch_size=16)
        train_stage1(cfg, tmp_path, dataset)
        res = train_stage2(cfg, tmp_path / "stage1.ckpt", tmp_path, dataset)
        train, _ = split_dataset(dataset)
        _, rmse, _ = evaluate_head(res["bundle"], train.images, train.w)
        assert rmse < 0.01

    def test_velocity_head(self, dataset, stage1_run, tmp_path):
        cfg, ckpt = stage1_run
        vcfg = RunConfig.from_dict({**cfg.__dict__, "head": "velocity"})
        res = train_stage2(vcfg, ckpt, tmp_path, dataset)
        assert res["bundle"].predict_head(np.zeros((1, 3, 32, 32), np.float32)).shape == (1, 4)

    def test_head_mismatch_rejected(self, dataset, stage1_run, tmp_path):
        cfg, ckpt = stage1_run
        train_stage2(cfg, ckpt, tmp_path, dataset)
        vcfg = RunConfig.from_dict({**cfg.__dict__, "head": "velocity"})
        with pytest.raises(CheckpointError, match="head"):
            tr.load_stage1(vcfg, tmp_path / "stage2.ckpt")

    def test_ds_mismatch_rejected(self, stage1_run):
        cfg, ckpt = stage1_run
        with pytest.raises(CheckpointError, match="deep-supervision"):
            tr.load_stage1(RunConfig.from_dict({**cfg.__dict__, "deep_supervision": False}), ckpt)

    def test_reload_reproduces_validation(self, dataset, stage1_run, tmp_path):
        cfg, ckpt = stage1_run
        res = train_stage2(cfg, ckpt, tmp_path, dataset)
        bundle, saved = load_bundle(tmp_path)
        assert saved == cfg
        _, val = split_dataset(dataset)
        _, rmse, _ = evaluate_head(bundle, validation_images(val, saved, make_pool(saved)), val.w)
        assert rmse == pytest.approx(res["val_rmse"], abs=1e-6)

    def test_merge_curves(self, dataset, stage1_run, tmp_path):
        cfg, ckpt = stage1_run
        train_stage1(cfg, tmp_path, dataset)
        train_stage2(cfg, tmp_path / "stage1.ckpt", tmp_path, dataset)
        tr.merge_curves(tmp_path)
        rows = (tmp_path / "curves.csv").read_text().splitlines()
        assert len(rows) == 3
        assert rows[1].startswith("1,1,") and rows[2].startswith("2,1,")
