"""Optimisation loop: Adam, per-seed runs, lowest-loss selection, checkpoints, logs."""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Rng
from .data import BatchIterator, MultiViewDataset
from .losses import LossBreakdown, LossConfig, total_loss
from .model import CloVenModel, ModelConfig, load_state, read_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, seed: int, epoch: int, step: int, batch_index: np.ndarray):
        super().__init__(f"non-finite loss (seed={seed}, epoch={epoch}, step={step})")
        self.seed, self.epoch, self.step = seed, epoch, step
        self.batch_index = batch_index


class Adam:
    """Adam with bias correction. A parameter whose ``grad`` is None is treated as having zero gradient."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            if p.grad is not None and p.grad.shape != p.data.shape:
                raise ContractError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, names: Sequence[str], arrays: dict, t: int) -> None:
        for name, m, v in zip(names, self.m, self.v):
            m[...] = arrays[f"adam.m.{name}"]
            v[...] = arrays[f"adam.v.{name}"]
        self.t = t


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: list(range(10)))
    deterministic: bool = True
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 0

    def validate(self) -> list[str]:
        errors = []
        if not self.lr > 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if not self.seeds:
            errors.append("seeds must be non-empty")
        if self.batch_size < 2:
            errors.append(f"batch_size must be >= 2, got {self.batch_size}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            errors.append(f"betas must be two values in [0, 1), got {self.betas}")
        return errors


@dataclass
class RunRecord:
    seed: int
    final_loss: float
    epoch_losses: list[LossBreakdown]
    checkpoint: Optional[str] = None
    log_path: Optional[str] = None
    model: Optional[CloVenModel] = field(default=None, repr=False, compare=False)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "final_loss": self.final_loss,
            "epochs": len(self.epoch_losses),
            "checkpoint": self.checkpoint,
            "log": self.log_path,
        }


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    keys = asdict(items[0]).keys()
    return LossBreakdown(**{k: float(np.mean([getattr(b, k) for b in items])) for k in keys})


def train_one(
    model_config: ModelConfig,
    dataset: MultiViewDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    seed: int,
    out_dir=None,
    resume_from=None,
    stop_after_epoch: Optional[int] = None,
) -> RunRecord:
    """Train one model from seed ``seed`` for ``train_cfg.epochs`` epochs.

    Every step appends one JSON line (seed, epoch, step and all loss terms) to
    ``out_dir/train_seed{seed}.ndjson``. ``stop_after_epoch`` ends the run early
    after checkpointing, and ``resume_from`` continues such a run exactly.
    """
    errors = train_cfg.validate() + loss_cfg.validate() + model_config.validate()
    if errors:
        raise ContractError("; ".join(errors))
    if dataset.dims != [w[0] for w in model_config.encoder_widths]:
        raise ContractError(f"dataset view dims {dataset.dims} do not match encoder inputs")
    out_dir = Path(out_dir) if out_dir is not None else None
    model = CloVenModel(model_config, seed=seed)
    names = [n for n, _ in model.named_parameters()]
    opt = Adam(model.parameters(), train_cfg.lr, train_cfg.betas, train_cfg.eps)
    epoch_losses: list[LossBreakdown] = []
    start = 0
    if resume_from is not None:
        header, arrays = read_checkpoint(resume_from)
        meta = header["meta"]
        if meta.get("seed") != seed:
            raise ContractError(f"checkpoint seed {meta.get('seed')} != {seed}")
        load_state(model, arrays)
        opt.load_state_arrays(names, arrays, meta["adam_t"])
        epoch_losses = [LossBreakdown(**e) for e in meta["epoch_losses"]]
        start = meta["epoch"]

    log_path = None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"train_seed{seed}.ndjson"
        log_fh = open(log_path, "a" if resume_from is not None else "w")
    it = BatchIterator(dataset, train_cfg.batch_size, seed=seed, drop_last=True)
    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else out_dir
    ckpt_path = None

    def checkpoint(epoch: int) -> Optional[Path]:
        if ckpt_dir is None:
            return None
        path = ckpt_dir / f"seed{seed}_epoch{epoch}.ckpt"
        meta = {"seed": seed, "epoch": epoch, "adam_t": opt.t,
                "epoch_losses": [asdict(b) for b in epoch_losses]}
        save_checkpoint(path, model, meta, opt.state_arrays(names))
        return path

    try:
        with _thread_limit(train_cfg.deterministic):
            model.train()
            last = train_cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, train_cfg.epochs)
            for epoch in range(start, last):
                steps = []
                for step, batch in enumerate(it.epoch(epoch)):
                    model.zero_grad()
                    out = model(batch.views, rng=Rng(seed, 0xD0, epoch, step))
                    loss, bd = total_loss(out, loss_cfg)
                    if not math.isfinite(bd.total):
                        if out_dir is not None:
                            (out_dir / f"nan_dump_seed{seed}.json").write_text(json.dumps({
                                "epoch": epoch, "step": step, "batch_index": batch.index.tolist(),
                                "breakdown": bd.as_dict()}))
                        raise TrainingDiverged(seed, epoch, step, batch.index)
                    ad.backward(loss)
                    opt.step()
                    steps.append(bd)
                    if log_fh is not None:
                        log_fh.write(json.dumps({"seed": seed, "epoch": epoch + 1, "step": step, **bd.as_dict()},
                                                sort_keys=True) + "\n")
                epoch_losses.append(_mean_breakdown(steps))
                done = epoch + 1
                if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0 and done < last:
                    checkpoint(done)
            ckpt_path = checkpoint(last)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return RunRecord(
        seed=seed,
        final_loss=epoch_losses[-1].total,
        epoch_losses=epoch_losses,
        checkpoint=None if ckpt_path is None else str(ckpt_path),
        log_path=None if log_path is None else str(log_path),
        model=model,
    )


def select_best(records: Sequence[RunRecord]) -> int:
    """Index of the record with the lowest final loss; ties go to the lowest seed."""
    if not records:
        raise ContractError("no runs to select from")
    return min(range(len(records)), key=lambda i: (records[i].final_loss, records[i].seed))


def multi_seed(
    model_config: ModelConfig,
    dataset: MultiViewDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    out_dir=None,
) -> tuple[RunRecord, list[RunRecord]]:
    records = []
    for seed in train_cfg.seeds:
        rec = train_one(model_config, dataset, train_cfg, loss_cfg, seed, out_dir)
        logger.info("seed %d: final loss %.6f", seed, rec.final_loss)
        records.append(rec)
    best = records[select_best(records)]
    if out_dir is not None:
        Path(out_dir, "runs.json").write_text(json.dumps(
            {"best_seed": best.seed, "runs": [r.summary() for r in records]}, indent=2, sort_keys=True) + "\n")
    return best, records


def relative_changes(losses: Sequence[float]) -> np.ndarray:
    """``|L[e] - L[e-1]| / |L[e-1]|`` for consecutive epochs."""
    x = np.asarray(losses, dtype=np.float64)
    return np.abs(np.diff(x)) / np.abs(x[:-1])
