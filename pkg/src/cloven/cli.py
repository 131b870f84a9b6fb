"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(unreadable data, diverged training), 3 verification failure (gradcheck).
Relative output directories are resolved under ``$CLOVEN_OUTPUT_ROOT`` when it
is set.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .autodiff import ContractError
from .checks import DEFAULT_TOL, run_suite
from .config import ConfigError, ExperimentConfig, SynthSection
from .data import FILLS, DatasetError, save_dataset
from .evaluation import ProbeConfig, evaluate_clustering, export_embeddings
from .experiments import (
    ABLATION_CASES,
    BASELINE,
    DEFAULT_RATES,
    SWEEP_COLUMNS,
    ablate_fusion_layers,
    ablate_loss_terms,
    ablation_grid,
    corruption_sweep,
    parse_case,
    write_rows,
)
from .model import load_checkpoint
from .train import TrainingDiverged, multi_seed

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "CLOVEN_OUTPUT_ROOT"

logger = logging.getLogger("cloven")

OUTPUTS_HELP = """\
outputs (written under the experiment's output_dir):
  train          config.json, train_seed{S}.ndjson (one JSON object per step:
                 seed, epoch, step, icl, ccl, entropy, contrast, ddc_term1..3,
                 ddc, total), seed{S}_epoch{E}.ckpt, runs.json, metrics.json,
                 summary.json (best_seed, final_loss, parameters, fusion_kind)
  corrupt-sweep  corrupt_{SCENARIO}.csv with columns rate,seed,acc,nmi,ari
  ablate         ablation_{AXIS}.csv with columns case|layers,seed,acc,nmi,ari
                 and ablation_{AXIS}_grid.csv with seed-averaged rows
                 (loss_terms: case,icl,ccl,ddc,asym,baseline,single_ablation,
                 module_ablation,acc,nmi,ari; fusion_layers: layers,acc,nmi,ari)
  eval           MetricsReport JSON: acc,nmi,ari (k-means on Z), head_acc,
                 head_nmi,head_ari (argmax of the clustering head), and with
                 --probe acc_cls,precision,fscore
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# configuration plumbing


def _set(doc: dict, dotted: str, value) -> None:
    node = doc
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot override {dotted}: {key} is not an object")
    node[leaf] = value


_OVERRIDES = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "seeds": "train.seeds",
    "fusion": "model.fusion_kind",
    "layers": "model.fusion_layers",
    "common_dim": "model.common_dim",
    "tau": "loss.tau",
    "sigma": "loss.sigma",
    "sigma_relative": "loss.sigma_relative",
    "entropy_mode": "loss.entropy_mode",
    "output_dir": "output_dir",
}


def load_config(args) -> ExperimentConfig:
    """Defaults, then the config file, then command-line flags."""
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError([f"{args.config}: {exc}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{args.config}: invalid JSON ({exc})"]) from exc
        if not isinstance(doc, dict):
            raise ConfigError([f"{args.config}: top level must be an object"])
    doc = copy.deepcopy(doc)
    for attr, dotted in _OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set(doc, dotted, value)
    if getattr(args, "manifest", None):
        doc["data"] = {"manifest": args.manifest}
    return ExperimentConfig.from_dict(doc)


def output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment (flags override the config file)")
    g.add_argument("--config", help="experiment JSON (sections: model, loss, train, data, corruption, output_dir)")
    g.add_argument("--manifest", help="dataset manifest; replaces the config's data section")
    g.add_argument("--output-dir", dest="output_dir")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--fusion", choices=("residual", "vanilla"))
    g.add_argument("--layers", type=int, help="fusion depth L")
    g.add_argument("--common-dim", dest="common_dim", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--sigma-relative", dest="sigma_relative", action="store_true", default=None)
    g.add_argument("--entropy-mode", dest="entropy_mode", choices=("per_sample", "marginal"))
    g.add_argument("-v", "--verbose", action="store_true")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0].keys())
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    dims = args.dims if args.dims else [10] * args.views
    if len(dims) == 1 and args.views > 1:
        dims = dims * args.views
    section = SynthSection(k=args.k, n=args.n, views=args.views, dims=list(dims), noise=args.noise,
                           separation=args.separation, seed=args.seed)
    errors = section.validate()
    if args.views < 1:
        errors.append(f"--views must be >= 1, got {args.views}")
    if errors:
        raise UsageError("; ".join(errors))
    ds = section.build()
    manifest = save_dataset(ds, args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = output_dir(cfg)
    dataset = cfg.data.load()
    model_cfg = cfg.model.build(dataset)
    _write_json(out / "config.json", cfg.to_dict())
    best, records = multi_seed(model_cfg, dataset, cfg.train, cfg.loss, out)
    report = evaluate_clustering(best.model, dataset, seed=best.seed, probe=args.probe)
    report.seed, report.epoch, report.loss = best.seed, len(best.epoch_losses), best.final_loss
    _write_json(out / "metrics.json", report.as_dict())
    summary = {
        "best_seed": best.seed,
        "final_loss": best.final_loss,
        "parameters": best.model.num_parameters(),
        "fusion_kind": model_cfg.fusion_kind,
        "fusion_layers": model_cfg.fusion_layers,
        "checkpoint": best.checkpoint,
        "metrics": report.as_dict(),
    }
    _write_json(out / "summary.json", summary)
    print(f"parameters  {summary['parameters']}")
    print(report.to_table())
    return EXIT_OK


def _dataset_for_eval(args):
    if args.manifest or args.config:
        return load_config(args).data.load()
    raise UsageError("give --manifest or --config to choose the evaluation data")


def cmd_eval(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    dataset = _dataset_for_eval(args)
    report = evaluate_clustering(model, dataset, seed=args.seed, restarts=args.restarts, probe=args.probe,
                                 probe_cfg=ProbeConfig(seed=args.seed))
    report.seed, report.epoch = meta.get("seed"), meta.get("epoch")
    text = report.to_json() if args.format == "json" else report.to_table()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    print(text)
    return EXIT_OK


def cmd_corrupt_sweep(args) -> int:
    cfg = load_config(args)
    out = output_dir(cfg)
    dataset = cfg.data.load()
    model_cfg = cfg.model.build(dataset)
    fill = args.fill or (cfg.corruption.fill if cfg.corruption else "zero")
    scenario = args.scenario or (cfg.corruption.scenario if cfg.corruption else "TCTI")
    for r in args.rates:
        if not 0.0 <= r < 1.0:
            raise UsageError(f"missing rates must lie in [0, 1), got {r}")
    result = corruption_sweep(model_cfg, dataset, cfg.train, cfg.loss, scenario, args.rates, fill,
                              out / f"corrupt_{scenario}")
    path = result.write_csv(out / f"corrupt_{scenario}.csv", SWEEP_COLUMNS)
    _print_rows([{"rate": v, "acc": result.mean(v), "nmi": result.mean(v, "nmi"), "ari": result.mean(v, "ari")}
                 for v in result.values()])
    print(path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    out = output_dir(cfg)
    dataset = cfg.data.load()
    model_cfg = cfg.model.build(dataset)
    if args.axis == "fusion_layers":
        result = ablate_fusion_layers(model_cfg, dataset, cfg.train, cfg.loss, args.depths, out / "ablation_layers")
        grid = [{"layers": v, "acc": result.mean(v), "nmi": result.mean(v, "nmi"), "ari": result.mean(v, "ari")}
                for v in result.values()]
    else:
        try:
            cases = _select_cases(args.cases, args.terms)
        except ContractError as exc:
            raise UsageError(str(exc)) from exc
        result = ablate_loss_terms(model_cfg, dataset, cfg.train, cfg.loss, cases, out / "ablation_cases")
        grid = ablation_grid(result)
    result.write_csv(out / f"ablation_{args.axis}.csv")
    path = write_rows(out / f"ablation_{args.axis}_grid.csv", grid)
    _print_rows(grid)
    print(path)
    return EXIT_OK


def _select_cases(names: Optional[Sequence[str]], terms: Optional[Sequence[str]]):
    by_name = {c.name: c for c in ABLATION_CASES}
    chosen = [BASELINE]
    for name in names or ([] if terms else list(by_name)):
        if name not in by_name:
            raise UsageError(f"unknown case {name!r}; choose from {sorted(by_name)}")
        if by_name[name] not in chosen:
            chosen.append(by_name[name])
    for text in terms or []:
        chosen.append(parse_case(text))
    return chosen


def cmd_gradcheck(args) -> int:
    checks = run_suite(seed=args.seed, tol=args.tol)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks within {args.tol:g}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_export_embeddings(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = _dataset_for_eval(args)
    for p in export_embeddings(model, dataset, args.out):
        print(p)
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="cloven", description=__doc__, epilog=OUTPUTS_HELP, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic multi-view Gaussian dataset", formatter_class=fmt)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--dims", type=int, nargs="+", help="per-view widths (one value is repeated)")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data/synth", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="multi-seed training, then evaluate the lowest-loss run",
                       epilog=OUTPUTS_HELP, formatter_class=fmt)
    _add_experiment_flags(p)
    p.add_argument("--probe", action="store_true", help="also fit the linear probe (8:2 split)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", epilog=OUTPUTS_HELP, formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--probe", action="store_true")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt-sweep", help="clustering under missing views", epilog=OUTPUTS_HELP,
                       formatter_class=fmt)
    _add_experiment_flags(p)
    p.add_argument("--scenario", choices=("TCTI", "TITI"))
    p.add_argument("--rates", type=float, nargs="+", default=list(DEFAULT_RATES))
    p.add_argument("--fill", choices=FILLS)
    p.set_defaults(func=cmd_corrupt_sweep)

    p = sub.add_parser("ablate", help="loss-term or fusion-depth ablation grid", epilog=OUTPUTS_HELP,
                       formatter_class=fmt)
    _add_experiment_flags(p)
    p.add_argument("--axis", choices=("loss_terms", "fusion_layers"), default="loss_terms")
    p.add_argument("--cases", nargs="+", help=f"named cases (Baseline is always run): "
                   f"{', '.join(c.name for c in ABLATION_CASES)}")
    p.add_argument("--terms", nargs="+", help="custom cases as comma lists of icl,ccl,ddc,asym")
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3, 4])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="write Z and each H as binary matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"cloven {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"cloven {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ContractError, DatasetError, OSError) as exc:
        print(f"cloven {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
