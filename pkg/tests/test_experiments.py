import csv

import pytest

from cloven.autodiff import ContractError
from cloven.data import synth_gaussian_multiview
from cloven.evaluation import MetricsReport
from cloven.experiments import (
    ABLATION_CASES,
    BASELINE,
    MODULE_ABLATIONS,
    SweepPoint,
    SweepResult,
    ablation_grid,
    corruption_sweep,
    parse_case,
    single_ablations,
)
from cloven.losses import LossConfig
from cloven.model import ModelConfig
from cloven.train import TrainConfig, train_one


def report(acc):
    return MetricsReport(acc, acc / 2, acc / 4, 0.0, 0.0, 0.0)


class TestCases:
    def test_parse(self):
        case = parse_case("icl, ddc")
        assert case.toggles == (True, False, True, False)

    def test_parse_rejects_unknown_and_empty(self):
        with pytest.raises(ContractError, match="unknown"):
            parse_case("icl,xyz")
        with pytest.raises(ContractError, match="every loss term"):
            parse_case("asym")

    def test_apply(self):
        cfg = parse_case("ccl").apply(LossConfig())
        assert (cfg.use_icl, cfg.use_ccl, cfg.use_ddc, cfg.asymmetric) == (False, True, False, False)

    def test_single_ablations(self):
        names = {c.name for c in single_ablations()}
        assert names == {"w/o ddc", "w/o asym", "w/o icl", "w/o ccl"}
        assert set(MODULE_ABLATIONS) <= names

    def test_names_unique(self):
        assert len({c.name for c in ABLATION_CASES}) == len(ABLATION_CASES)
        assert len({c.toggles for c in ABLATION_CASES}) == len(ABLATION_CASES)


class TestSweepResult:
    def test_mean_and_rows(self, tmp_path):
        res = SweepResult("rate", [SweepPoint(0.0, 0, report(0.8)), SweepPoint(0.0, 1, report(0.6)),
                                   SweepPoint(0.5, 0, report(0.4))])
        assert res.values() == [0.0, 0.5]
        assert res.mean(0.0) == pytest.approx(0.7) and res.mean(0.0, "nmi") == pytest.approx(0.35)
        with pytest.raises(KeyError):
            res.mean(0.9)
        path = res.write_csv(tmp_path / "r.csv")
        rows = list(csv.DictReader(open(path)))
        assert len(rows) == 3 and rows[2]["acc"] == "0.400000"

    def test_grid_marks(self):
        cases = {c.name: c for c in ABLATION_CASES}
        res = SweepResult("case", [SweepPoint(n, 0, report(0.5)) for n in cases], cases)
        grid = {r["case"]: r for r in ablation_grid(res)}
        assert grid["Baseline"]["baseline"] == 1
        assert grid["w/o icl"]["single_ablation"] == 1 and grid["w/o icl"]["module_ablation"] == 0
        assert grid["w/o asym"]["module_ablation"] == 1
        assert grid["ddc only"]["single_ablation"] == 0


@pytest.fixture(scope="module")
def setup():
    ds = synth_gaussian_multiview(k=3, n=45, views=2, dims=(4, 3), seed=0)
    cfg = ModelConfig(encoder_widths=[[4, 6], [3, 6]], common_dim=6, clusters=3, clustering_hidden_width=5)
    return ds, cfg, TrainConfig(epochs=1, batch_size=15, seeds=[0, 1])


class TestCorruptionSweep:
    def test_grid_size(self, setup):
        ds, cfg, tc = setup
        res = corruption_sweep(cfg, ds, tc, LossConfig(), rates=(0.0, 0.4))
        assert len(res.points) == 4

    def test_reuses_trained(self, setup):
        ds, cfg, tc = setup
        trained = {s: train_one(cfg, ds, tc, LossConfig(), s) for s in tc.seeds}
        a = corruption_sweep(cfg, ds, tc, LossConfig(), rates=(0.3,), trained=trained)
        b = corruption_sweep(cfg, ds, tc, LossConfig(), rates=(0.3,))
        assert [p.report.acc for p in a.points] == [p.report.acc for p in b.points]

    def test_bad_inputs(self, setup):
        ds, cfg, tc = setup
        with pytest.raises(ContractError):
            corruption_sweep(cfg, ds, tc, LossConfig(), rates=(1.0,))
        with pytest.raises(ContractError):
            corruption_sweep(cfg, ds, tc, LossConfig(), scenario="XX")


def test_baseline_enables_everything():
    assert BASELINE.toggles == (True, True, True, True)
