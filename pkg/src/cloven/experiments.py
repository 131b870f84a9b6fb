"""Corruption sweeps and ablation grids built from independently seeded training cells."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractError
from .data import CorruptionSpec, MultiViewDataset, corrupt
from .evaluation import MetricsReport, evaluate_clustering
from .losses import LossConfig
from .model import ModelConfig
from .train import RunRecord, TrainConfig, train_one

logger = logging.getLogger(__name__)

DEFAULT_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
SWEEP_COLUMNS = ("rate", "seed", "acc", "nmi", "ari")
LOSS_TOGGLES = ("icl", "ccl", "ddc", "asym")


@dataclass
class SweepPoint:
    axis_value: object
    seed: int
    report: MetricsReport
    label: str = ""


@dataclass
class SweepResult:
    """One metrics report per (axis value, seed)."""

    axis: str
    points: list[SweepPoint] = field(default_factory=list)
    cases: dict = field(default_factory=dict)

    def values(self) -> list:
        seen = []
        for p in self.points:
            if p.axis_value not in seen:
                seen.append(p.axis_value)
        return seen

    def mean(self, axis_value, metric: str = "acc") -> float:
        vals = [getattr(p.report, metric) for p in self.points if p.axis_value == axis_value]
        if not vals:
            raise KeyError(axis_value)
        return float(np.mean(vals))

    def rows(self) -> list[dict]:
        return [{self.axis: p.axis_value, "seed": p.seed, "acc": p.report.acc,
                 "nmi": p.report.nmi, "ari": p.report.ari} for p in self.points]

    def write_csv(self, path, columns: Optional[Sequence[str]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        columns = list(columns or (rows[0].keys() if rows else [self.axis, "seed", "acc", "nmi", "ari"]))
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r[k]) for k in columns})
        return path


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def _cell_dir(root, *parts) -> Optional[Path]:
    return None if root is None else Path(root).joinpath(*parts)


# ----------------------------------------------------------------------------
# corruption sweeps


def corruption_sweep(
    model_config: ModelConfig,
    dataset: MultiViewDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    scenario: str = "TCTI",
    rates: Sequence[float] = DEFAULT_RATES,
    fill: str = "zero",
    out_dir=None,
    trained: Optional[dict[int, RunRecord]] = None,
) -> SweepResult:
    """Evaluate clustering as views go missing.

    TCTI trains once per seed on clean data and scores each corrupted copy;
    TITI retrains every (rate, seed) cell on the corrupted data. ``trained``
    may supply already trained clean TCTI models keyed by seed. The
    corruption pattern for seed ``s`` is drawn from seed ``s`` so cells are
    reproducible on their own.
    """
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ContractError(f"missing rates must lie in [0, 1), got {r}")
    if scenario not in ("TCTI", "TITI"):
        raise ContractError(f"unknown scenario {scenario!r}")
    result = SweepResult("rate")
    trained = dict(trained or {})
    if scenario == "TCTI":
        for seed in train_cfg.seeds:
            if seed not in trained:
                trained[seed] = train_one(model_config, dataset, train_cfg, loss_cfg, seed,
                                          _cell_dir(out_dir, f"seed{seed}"))
    for rate in rates:
        for seed in train_cfg.seeds:
            spec = CorruptionSpec(scenario, rate, fill, rng_seed=seed)
            train_ds, eval_ds = corrupt(dataset, spec)
            if scenario == "TCTI":
                model = trained[seed].model
            else:
                model = train_one(model_config, train_ds, train_cfg, loss_cfg, seed,
                                  _cell_dir(out_dir, f"rate{rate:g}", f"seed{seed}")).model
            report = evaluate_clustering(model, eval_ds, seed=seed)
            report.seed = seed
            logger.info("%s rate=%.2f seed=%d acc=%.4f", scenario, rate, seed, report.acc)
            result.points.append(SweepPoint(rate, seed, report))
    return result


# ----------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationCase:
    name: str
    icl: bool
    ccl: bool
    ddc: bool
    asym: bool

    @property
    def toggles(self) -> tuple[bool, ...]:
        return (self.icl, self.ccl, self.ddc, self.asym)

    def apply(self, cfg: LossConfig) -> LossConfig:
        if not (self.icl or self.ccl or self.ddc):
            raise ContractError(f"ablation case {self.name!r} disables every loss term")
        return replace(cfg, use_icl=self.icl, use_ccl=self.ccl, use_ddc=self.ddc, asymmetric=self.asym)

    def differs_by_one(self, other: "AblationCase") -> bool:
        return sum(a != b for a, b in zip(self.toggles, other.toggles)) == 1


BASELINE = AblationCase("Baseline", True, True, True, True)

# term combinations with their ablated variants, plus the two remaining leave-one-out cases
ABLATION_CASES = (
    BASELINE,
    AblationCase("icl+asym", True, False, False, True),
    AblationCase("ccl+asym", False, True, False, True),
    AblationCase("icl+ccl", True, True, False, False),
    AblationCase("w/o ddc", True, True, False, True),
    AblationCase("ddc only", False, False, True, False),
    AblationCase("w/o asym", True, True, True, False),
    AblationCase("w/o icl", False, True, True, True),
    AblationCase("w/o ccl", True, False, True, True),
)


# removing one architectural module: the divergence-based clustering guidance
# or the asymmetric (fused-anchored) contrast
MODULE_ABLATIONS = ("w/o ddc", "w/o asym")


def single_ablations(cases: Sequence[AblationCase] = ABLATION_CASES) -> list[AblationCase]:
    return [c for c in cases if c.differs_by_one(BASELINE)]


def parse_case(text: str) -> AblationCase:
    """Parse ``"icl,ccl,asym"`` style term lists into a case."""
    terms = {t.strip() for t in text.split(",") if t.strip()}
    unknown = terms - set(LOSS_TOGGLES)
    if unknown:
        raise ContractError(f"unknown loss terms {sorted(unknown)}; choose from {LOSS_TOGGLES}")
    case = AblationCase(text, *(t in terms for t in LOSS_TOGGLES))
    if not (case.icl or case.ccl or case.ddc):
        raise ContractError(f"ablation case {text!r} disables every loss term")
    return case


def ablate_loss_terms(
    model_config: ModelConfig,
    dataset: MultiViewDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    cases: Sequence[AblationCase] = ABLATION_CASES,
    out_dir=None,
    trained: Optional[dict[tuple[str, int], RunRecord]] = None,
) -> SweepResult:
    """Retrain every (case, seed) cell and score it; ``trained`` may pre-supply cells."""
    configs = [(c, c.apply(loss_cfg)) for c in cases]
    result = SweepResult("case", cases={c.name: c for c in cases})
    trained = trained or {}
    for case, cfg in configs:
        for seed in train_cfg.seeds:
            rec = trained.get((case.name, seed))
            if rec is None:
                rec = train_one(model_config, dataset, train_cfg, cfg, seed,
                                _cell_dir(out_dir, _slug(case.name), f"seed{seed}"))
            report = evaluate_clustering(rec.model, dataset, seed=seed)
            report.seed, report.loss = seed, rec.final_loss
            logger.info("case=%s seed=%d acc=%.4f", case.name, seed, report.acc)
            result.points.append(SweepPoint(case.name, seed, report))
    return result


def ablate_fusion_layers(
    model_config: ModelConfig,
    dataset: MultiViewDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    layers: Sequence[int] = (1, 2, 3, 4),
    out_dir=None,
) -> SweepResult:
    result = SweepResult("layers")
    for depth in layers:
        cfg = replace(model_config, fusion_layers=depth)
        for seed in train_cfg.seeds:
            rec = train_one(cfg, dataset, train_cfg, loss_cfg, seed, _cell_dir(out_dir, f"L{depth}", f"seed{seed}"))
            report = evaluate_clustering(rec.model, dataset, seed=seed)
            report.seed, report.loss = seed, rec.final_loss
            result.points.append(SweepPoint(depth, seed, report))
    return result


def ablation_grid(result: SweepResult) -> list[dict]:
    """Seed-averaged table: one row per case with its toggles and mean metrics."""
    cases = result.cases
    rows = []
    for name in result.values():
        row = {"case": name}
        case = cases.get(name)
        if case is not None:
            row.update({t: int(v) for t, v in zip(LOSS_TOGGLES, case.toggles)})
            row["baseline"] = int(case == BASELINE)
            row["single_ablation"] = int(case.differs_by_one(BASELINE))
            row["module_ablation"] = int(name in MODULE_ABLATIONS)
        for m in ("acc", "nmi", "ari"):
            row[m] = result.mean(name, m)
        rows.append(row)
    return rows


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_").lower()


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return path
