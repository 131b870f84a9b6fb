"""Finite-difference verification of every differentiable op and loss term."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Rng, Tensor
from .model import CloVenModel, ModelConfig

DEFAULT_TOL = 1e-4


@dataclass
class GradCheck:
    name: str
    error: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} max_rel_err={self.error:.3e}"


def _scalarize(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _op_checks(rng: Rng, n: int, d: int) -> list[tuple[str, Callable[[], float]]]:
    x = rng.normal((n, d))
    y = rng.normal((n, d))
    pos = rng.uniform(0.5, 2.0, (n, d))
    prob = rng.uniform(0.05, 0.95, (n, d))
    m = rng.normal((d, 4))
    w_nd = rng.normal((n, d))
    gamma, beta = rng.normal(d) + 1.0, rng.normal(d)

    def unary(op, data):
        w = rng.normal(np.shape(op(Tensor(data)).data))
        return lambda: ad.gradcheck(lambda t: _scalarize(op(t), w), Tensor(data.copy()))

    def binary(op, a, b):
        w = rng.normal(np.shape(op(Tensor(a), Tensor(b)).data))

        def run():
            ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
            return ad.gradcheck_many(lambda: _scalarize(op(ta, tb), w), [ta, tb])

        return run

    def batchnorm_check():
        tx = Tensor(x.copy(), requires_grad=True)
        tg, tb = Tensor(gamma.copy(), requires_grad=True), Tensor(beta.copy(), requires_grad=True)

        def f():
            out = ad.batchnorm(tx, tg, tb, np.zeros(d), np.ones(d), training=True)
            return _scalarize(out, w_nd)

        return ad.gradcheck_many(f, [tx, tg, tb])

    def dropout_check():
        return ad.gradcheck(lambda t: _scalarize(ad.dropout(t, 0.3, True, Rng(7)), w_nd), Tensor(x.copy()))

    return [
        ("add", binary(ad.add, x, y[:1])),
        ("sub", binary(ad.sub, x, y)),
        ("mul", binary(ad.mul, x, y)),
        ("div", binary(ad.div, x, pos)),
        ("neg", unary(ad.neg, x)),
        ("exp", unary(ad.exp, x)),
        ("log", unary(ad.log, pos)),
        ("sqrt", unary(ad.sqrt, pos)),
        ("relu", unary(ad.relu, x)),
        ("xlogx", unary(ad.xlogx, prob)),
        ("clamp_min", unary(lambda t: ad.clamp_min(t, 0.1), x)),
        ("matmul", binary(ad.matmul, x, m)),
        ("transpose", unary(ad.transpose, x)),
        ("sum", unary(lambda t: ad.sum(t, axis=0, keepdims=True), x)),
        ("mean", unary(lambda t: ad.mean(t, axis=1), x)),
        ("concat", binary(lambda a, b: ad.concat([a, b], axis=1), x, y)),
        ("reshape", unary(lambda t: ad.reshape(t, (d, n)), x)),
        ("take_columns", unary(lambda t: ad.take_columns(t, [0, 2, 2]), x)),
        ("take_rows", unary(lambda t: ad.take_rows(t, [1, 1, 3]), x)),
        ("diagonal", unary(ad.diagonal, rng.normal((d, d)))),
        ("softmax", unary(ad.softmax, x)),
        ("batchnorm", batchnorm_check),
        ("dropout", dropout_check),
    ]


def _loss_checks(rng: Rng, n: int, d: int, k: int, views: int) -> list[tuple[str, Callable[[], float]]]:
    zp = rng.normal((n, d))
    hps = [rng.normal((n, d)) for _ in range(views)]
    za = rng.normal((n, k))
    has = [rng.normal((n, k)) for _ in range(views)]
    hidden = rng.normal((n, d), 0.1)

    def leaves():
        return (Tensor(zp.copy(), requires_grad=True), [Tensor(h.copy(), requires_grad=True) for h in hps],
                Tensor(za.copy(), requires_grad=True), [Tensor(a.copy(), requires_grad=True) for a in has],
                Tensor(hidden.copy(), requires_grad=True))

    def check(f):
        def run():
            z, hs, zl, hl, hid = leaves()
            return ad.gradcheck_many(lambda: f(z, hs, ad.softmax(zl), [ad.softmax(a) for a in hl], hid),
                                     [z, *hs, zl, *hl, hid])
        return run

    def ent(mode):
        return lambda z, hs, az, ahs, hid: sum(
            (L.assignment_entropy(az, ah, mode) for ah in ahs[1:]), L.assignment_entropy(az, ahs[0], mode))

    def contrast(z, hs, az, ahs, hid):
        icl = L.instance_contrastive(z, hs)
        ccl = L.category_contrastive(az, ahs)
        return L.contrast_loss(icl, ccl, [L.assignment_entropy(az, ah) for ah in ahs], views)

    def ddc_term(i, relative=False):
        return lambda z, hs, az, ahs, hid: L.ddc_loss(az, hid, 0.15, relative)[1][i]

    return [
        ("loss.instance_contrastive", check(lambda z, hs, az, ahs, hid: L.instance_contrastive(z, hs))),
        ("loss.category_contrastive", check(lambda z, hs, az, ahs, hid: L.category_contrastive(az, ahs))),
        ("loss.entropy_per_sample", check(ent("per_sample"))),
        ("loss.entropy_marginal", check(ent("marginal"))),
        ("loss.contrast", check(contrast)),
        ("loss.ddc_term1", check(ddc_term(0))),
        ("loss.ddc_term2", check(ddc_term(1))),
        ("loss.ddc_term3", check(ddc_term(2))),
        ("loss.ddc_relative_sigma", check(lambda z, hs, az, ahs, hid: L.ddc_loss(az, hid, 0.5, True)[0])),
        ("loss.ddc", check(lambda z, hs, az, ahs, hid: L.ddc_loss(az, hid)[0])),
    ]


def _model_check(rng: Rng, n: int, d: int, k: int, views: int) -> tuple[str, Callable[[], float]]:
    cfg = ModelConfig(encoder_widths=[[d, 6, d]] * views, common_dim=d, clusters=k, fusion_layers=1,
                      projection_widths=[d, d, d], clustering_hidden_width=4)
    xs = [rng.normal((n, d)) for _ in range(views)]

    def run():
        model = CloVenModel(cfg, seed=rng.seed)
        model.train()

        def f():
            loss, _ = L.total_loss(model(xs, rng=Rng(11)), L.LossConfig(sigma=0.5))
            return loss

        return ad.gradcheck_many(f, model.parameters())

    return "loss.total(model params)", run


def run_suite(seed: int = 0, n: int = 8, d: int = 5, k: int = 3, views: int = 2,
              tol: float = DEFAULT_TOL) -> list[GradCheck]:
    """Central-difference check (h=1e-5) of every op and loss term on seeded random inputs."""
    rng = Rng(seed, 0x6C)
    checks = _op_checks(rng.fork(1), n, d) + _loss_checks(rng.fork(2), n, d, k, views)
    checks.append(_model_check(rng.fork(3), n, d, k, views))
    return [GradCheck(name, run(), tol) for name, run in checks]
