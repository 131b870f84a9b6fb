import json

import numpy as np
import pytest

from cloven.autodiff import ContractError, Tensor
from cloven.data import MultiViewDataset, synth_gaussian_multiview
from cloven.losses import LossConfig
from cloven.model import ModelConfig, read_checkpoint
from cloven.train import (
    Adam,
    RunRecord,
    TrainConfig,
    TrainingDiverged,
    multi_seed,
    relative_changes,
    select_best,
    train_one,
)


@pytest.fixture(scope="module")
def tiny():
    ds = synth_gaussian_multiview(k=3, n=48, views=2, dims=(5, 4), seed=0)
    cfg = ModelConfig(encoder_widths=[[5, 8], [4, 8]], common_dim=8, clusters=3, clustering_hidden_width=6)
    return ds, cfg


def quick(**kw):
    base = dict(epochs=3, batch_size=16, seeds=[0], lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_first_step_closed_form(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        p.grad = np.ones(1)
        Adam([p], lr=0.1).step()
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)

    def test_step_size_independent_of_gradient_scale(self):
        for g in (1e-3, 5.0):
            p = Tensor(np.zeros(1), requires_grad=True)
            p.grad = np.full(1, g)
            Adam([p], lr=0.01).step()
            assert p.data[0] == pytest.approx(-0.01, rel=1e-4)

    def test_none_grad_is_zero(self):
        p = Tensor(np.ones(2), requires_grad=True)
        Adam([p], lr=0.1).step()
        np.testing.assert_array_equal(p.data, 1.0)

    def test_quadratic_descends(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(400):
            p.grad = 2 * p.data
            opt.step()
        assert np.abs(p.data).max() < 0.05

    def test_shape_check(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.zeros(3)
        with pytest.raises(ContractError):
            Adam([p]).step()


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.epochs, cfg.batch_size, cfg.seeds) == (1e-4, 100, 64, list(range(10)))
        assert cfg.validate() == []

    def test_invalid(self):
        errors = TrainConfig(lr=0, epochs=0, seeds=[], batch_size=1, betas=(1.0, 0.5)).validate()
        assert len(errors) == 5


class TestTrainOne:
    def test_log_and_losses(self, tiny, tmp_path):
        ds, cfg = tiny
        rec = train_one(cfg, ds, quick(), LossConfig(), 0, tmp_path)
        lines = [json.loads(x) for x in open(rec.log_path)]
        assert len(lines) == 3 * 3
        assert {"seed", "epoch", "step", "total", "icl", "ccl", "ddc"} <= set(lines[0])
        assert len(rec.epoch_losses) == 3
        assert rec.final_loss == rec.epoch_losses[-1].total
        assert rec.epoch_losses[-1].total == pytest.approx(np.mean([x["total"] for x in lines[-3:]]))

    def test_deterministic_logs(self, tiny, tmp_path):
        ds, cfg = tiny
        a = train_one(cfg, ds, quick(), LossConfig(), 1, tmp_path / "a")
        b = train_one(cfg, ds, quick(), LossConfig(), 1, tmp_path / "b")
        assert open(a.log_path, "rb").read() == open(b.log_path, "rb").read()
        assert open(a.checkpoint, "rb").read() == open(b.checkpoint, "rb").read()

    def test_resume_is_bitwise(self, tiny, tmp_path):
        ds, cfg = tiny
        full = train_one(cfg, ds, quick(epochs=4), LossConfig(), 2, tmp_path / "full")
        part = train_one(cfg, ds, quick(epochs=4), LossConfig(), 2, tmp_path / "part", stop_after_epoch=2)
        assert len(part.epoch_losses) == 2
        resumed = train_one(cfg, ds, quick(epochs=4), LossConfig(), 2, tmp_path / "part",
                            resume_from=part.checkpoint)
        assert open(full.log_path, "rb").read() == open(resumed.log_path, "rb").read()
        _, fa = read_checkpoint(full.checkpoint)
        _, ra = read_checkpoint(resumed.checkpoint)
        assert fa.keys() == ra.keys()
        assert all(fa[k].tobytes() == ra[k].tobytes() for k in fa)

    def test_resume_wrong_seed(self, tiny, tmp_path):
        ds, cfg = tiny
        part = train_one(cfg, ds, quick(), LossConfig(), 0, tmp_path, stop_after_epoch=1)
        with pytest.raises(ContractError):
            train_one(cfg, ds, quick(), LossConfig(), 1, tmp_path, resume_from=part.checkpoint)

    def test_dim_mismatch(self, tiny):
        ds, _ = tiny
        cfg = ModelConfig(encoder_widths=[[6, 8], [4, 8]], common_dim=8, clusters=3)
        with pytest.raises(ContractError):
            train_one(cfg, ds, quick(), LossConfig(), 0)

    def test_nan_raises_with_dump(self, tiny, tmp_path):
        ds, cfg = tiny
        views = [v.copy() for v in ds.views]
        views[0][5, 0] = np.nan
        bad = MultiViewDataset(views, ds.labels)
        with pytest.raises(TrainingDiverged) as info:
            train_one(cfg, bad, quick(), LossConfig(), 0, tmp_path)
        assert 5 in info.value.batch_index
        dump = json.loads((tmp_path / "nan_dump_seed0.json").read_text())
        assert 5 in dump["batch_index"]

    def test_loss_decreases(self, tiny):
        ds, cfg = tiny
        rec = train_one(cfg, ds, quick(epochs=15, lr=3e-3), LossConfig(), 0)
        assert rec.epoch_losses[-1].total < rec.epoch_losses[0].total


def _record(seed, loss):
    return RunRecord(seed=seed, final_loss=loss, epoch_losses=[])


class TestSelection:
    def test_lowest_loss(self):
        assert select_best([_record(0, 3.0), _record(1, 1.0), _record(2, 2.0)]) == 1

    def test_tie_goes_to_lowest_seed(self):
        assert select_best([_record(4, 1.0), _record(2, 1.0), _record(3, 5.0)]) == 1

    def test_empty(self):
        with pytest.raises(ContractError):
            select_best([])

    def test_multi_seed_writes_summary(self, tiny, tmp_path):
        ds, cfg = tiny
        best, records = multi_seed(cfg, ds, quick(epochs=1, seeds=[0, 1]), LossConfig(), tmp_path)
        runs = json.loads((tmp_path / "runs.json").read_text())
        assert runs["best_seed"] == best.seed
        assert best.final_loss == min(r.final_loss for r in records)
        assert [r["seed"] for r in runs["runs"]] == [0, 1]


class TestRelativeChanges:
    def test_values(self):
        np.testing.assert_allclose(relative_changes([10.0, 8.0, 8.4]), [0.2, 0.05])

    def test_negative_losses(self):
        np.testing.assert_allclose(relative_changes([-2.0, -3.0]), [0.5])
